"""SVG/CSV figure rendering for evaluation reports."""

from __future__ import annotations

import csv
import json
import os


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def render_all(cost_report=None, chronic_report=None, pairs=None,
               out_dir=".") -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    made = []

    def save(fig, name):
        path = os.path.join(out_dir, name)
        fig.savefig(path, format="svg")
        plt.close(fig)
        made.append(path)

    if cost_report:
        report = _load_json(cost_report)
        slices = report["report"]["slices"]["rows"]
        names = sorted(slices)
        values = [slices[n] for n in names]
        fig, ax = plt.subplots(figsize=(7, 3.2))
        ax.bar(range(len(names)), values, color="#4878a8")
        ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
        ax.set_ylabel("NMAE (%)")
        ax.set_title("NMAE across demographic slices")
        fig.tight_layout()
        save(fig, "nmae_slices.svg")
        csv_path = os.path.join(out_dir, "nmae_slices.csv")
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["slice", "nmae"])
            w.writerows(zip(names, values))
        made.append(csv_path)

    if pairs:
        rows = []
        with open(pairs, "r", encoding="utf-8", newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append((float(rec["actual"]), float(rec["predicted"])))
        if rows:
            actuals = sorted((a for a, _ in rows), reverse=True)
            k = max(1, (len(rows) + 99) // 100)
            cutoff = actuals[k - 1]
            scored = sorted(rows, key=lambda r: -r[1])
            pos_total = sum(1 for a, _ in rows if a >= cutoff)
            neg_total = len(rows) - pos_total
            xs, ys = [0.0], [0.0]
            tp = fp = 0
            for a, _ in scored:
                if a >= cutoff:
                    tp += 1
                else:
                    fp += 1
                xs.append(fp / max(neg_total, 1))
                ys.append(tp / max(pos_total, 1))
            fig, ax = plt.subplots(figsize=(4.2, 4))
            ax.plot(xs, ys, color="#a84848")
            ax.plot([0, 1], [0, 1], ":", color="gray")
            ax.set_xlabel("False positive rate")
            ax.set_ylabel("True positive rate")
            ax.set_title("Top 1% identification ROC")
            fig.tight_layout()
            save(fig, "top1_roc.svg")
            csv_path = os.path.join(out_dir, "top1_roc.csv")
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["fpr", "tpr"])
                w.writerows(zip(xs, ys))
            made.append(csv_path)

    if chronic_report:
        report = _load_json(chronic_report)
        rows = [r for r in report["rows"] if r["auroc"] is not None]
        if rows:
            names = [r["condition"] for r in rows]
            fig, ax = plt.subplots(figsize=(7, 0.35 * len(rows) + 1.6))
            ax.barh(range(len(rows)), [r["auroc"] for r in rows], color="#48a868")
            ax.set_yticks(range(len(rows)), names, fontsize=7)
            ax.invert_yaxis()
            ax.set_xlabel("AUROC")
            ax.set_xlim(0, 1)
            ax.set_title("AUROC by condition")
            fig.tight_layout()
            save(fig, "auroc_by_condition.svg")

            fig, ax = plt.subplots(figsize=(5, 4))
            sizes = [2000 * r["occurrence_ratio"] + 10 for r in rows]
            ax.scatter([r["auprc"] for r in rows], [r["auroc"] for r in rows],
                       s=sizes, alpha=0.6, color="#8148a8")
            ax.set_xlabel("Average precision")
            ax.set_ylabel("AUROC")
            ax.set_title("Precision vs ROC by condition (size = occurrence)")
            fig.tight_layout()
            save(fig, "aps_vs_roc.svg")
    return made
