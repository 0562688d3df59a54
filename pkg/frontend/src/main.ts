// DOM wiring for the what-if explorer. All numbers on screen are echoed
// from service responses via the viewmodel; this file only moves them
// around.

import { HistoryEvent, ServiceClient, ServiceError, VocabSummary } from "./api.js";
import { Scenario, ScenarioStore } from "./state.js";
import {
  DEFAULT_LAYOUT, SERIES_COLORS, axisTicks, curveGeometry, sharedYMax,
} from "./chart.js";
import {
  comparisonArms, costSummary, curvesFor, deltaTable, trackedConditions,
} from "./viewmodel.js";

const client = new ServiceClient("");
const store = new ScenarioStore();
let vocabSurfaces: string[] = [];
const compareSelection = new Set<number>();
let compareCondition = "";

const $ = (id: string) => document.getElementById(id) as HTMLElement;

function el(tag: string, attrs: Record<string, string> = {}, text = ""): HTMLElement {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text) node.textContent = text;
  return node;
}

function knobs(): { n_futures: number; horizon_days: number; temperature: number; top_k: number; seed?: number } {
  const out = {
    n_futures: Number((($("n-futures")) as HTMLInputElement).value) || 64,
    horizon_days: Number((($("horizon")) as HTMLInputElement).value) || 365,
    temperature: Number((($("temperature")) as HTMLInputElement).value),
    top_k: Number((($("top-k")) as HTMLInputElement).value) || 0,
  } as ReturnType<typeof knobs>;
  const seedRaw = (($("seed")) as HTMLInputElement).value.trim();
  if (seedRaw !== "") out.seed = Number(seedRaw);
  return out;
}

async function runScenario(id: number): Promise<void> {
  const s = store.get(id);
  if (!s) return;
  const requestId = store.beginRequest(id);
  if (requestId === null) return;           // one in-flight request per scenario
  renderScenarios();
  const history = { age: s.age, sex: s.sex, events: s.events };
  try {
    if (s.intervention) {
      const r = await client.intervene(
        history,
        { system: s.intervention.system, code: s.intervention.code },
        knobs(),
      );
      store.applyResult(id, requestId, {
        seed: r.seed, base: r.base, intervened: r.intervened, deltas: r.deltas,
      });
    } else {
      const b = await client.simulate(history, knobs());
      store.applyResult(id, requestId, {
        seed: b.seed, base: b, intervened: null, deltas: [],
      });
    }
  } catch (err) {
    const msg = err instanceof ServiceError
      ? `service ${err.status}: ${err.message}`
      : `service unreachable: ${err}`;
    store.applyError(id, requestId, msg);
  }
  renderScenarios();
  renderCompare();
}

function eventRow(s: Scenario, e: HistoryEvent, index: number): HTMLElement {
  const row = el("li", { class: "event-row" },
    `${e.date}  ${e.system}:${e.code}` + (e.paid != null ? `  $${e.paid}` : ""));
  const drop = el("button", { class: "mini" }, "remove");
  drop.addEventListener("click", () => {
    store.removeEvent(s.id, index);
    renderScenarios();
  });
  row.appendChild(drop);
  return row;
}

function parseEventInputs(card: HTMLElement): HistoryEvent | null {
  const date = (card.querySelector(".ev-date") as HTMLInputElement).value;
  const system = (card.querySelector(".ev-system") as HTMLSelectElement).value;
  const code = (card.querySelector(".ev-code") as HTMLInputElement).value.trim();
  const paidRaw = (card.querySelector(".ev-paid") as HTMLInputElement).value.trim();
  if (!date || !code) return null;
  const event: HistoryEvent = { date, system, code };
  if (paidRaw !== "") event.paid = Number(paidRaw);
  return event;
}

function scenarioCard(s: Scenario): HTMLElement {
  const card = el("div", { class: "card", "data-id": String(s.id) });
  const head = el("div", { class: "card-head" });
  const title = el("input", { class: "label", value: s.label });
  title.addEventListener("change", () =>
    store.setLabel(s.id, (title as HTMLInputElement).value));
  head.appendChild(title);
  const dup = el("button", { class: "mini" }, "duplicate");
  dup.addEventListener("click", () => {
    store.duplicateScenario(s.id);
    renderScenarios();
  });
  const rm = el("button", { class: "mini" }, "delete");
  rm.addEventListener("click", () => {
    compareSelection.delete(s.id);
    store.removeScenario(s.id);
    renderScenarios();
    renderCompare();
  });
  head.append(dup, rm);
  card.appendChild(head);

  const demo = el("div", { class: "row" });
  demo.appendChild(el("span", {}, "age"));
  const age = el("input", { type: "number", value: String(s.age), min: "0", max: "110" });
  age.addEventListener("change", () => {
    store.setDemographics(s.id, Number((age as HTMLInputElement).value), s.sex);
    renderScenarios();
  });
  demo.appendChild(age);
  demo.appendChild(el("span", {}, "sex"));
  const sex = el("select") as HTMLSelectElement;
  for (const v of ["F", "M", "U"]) {
    const o = el("option", { value: v }, v) as HTMLOptionElement;
    if (v === s.sex) o.selected = true;
    sex.appendChild(o);
  }
  sex.addEventListener("change", () => {
    store.setDemographics(s.id, s.age, sex.value as Scenario["sex"]);
    renderScenarios();
  });
  demo.appendChild(sex);
  card.appendChild(demo);

  const list = el("ul", { class: "events" });
  s.events.forEach((e, i) => list.appendChild(eventRow(s, e, i)));
  card.appendChild(list);

  const add = el("div", { class: "row" });
  add.appendChild(el("input", { class: "ev-date", type: "date", value: "2017-06-01" }));
  const system = el("select", { class: "ev-system" });
  for (const v of ["ICD10CM", "ICD10PCS", "CPT4", "HCPCS", "NDC", "PLACE_OF_SERVICE"]) {
    system.appendChild(el("option", { value: v }, v));
  }
  add.appendChild(system);
  add.appendChild(el("input", { class: "ev-code", list: "vocab-codes", placeholder: "code, e.g. I10" }));
  add.appendChild(el("input", { class: "ev-paid", type: "number", placeholder: "paid $" }));
  const addBtn = el("button", { class: "mini" }, "add event");
  addBtn.addEventListener("click", () => {
    const event = parseEventInputs(card);
    if (event) {
      store.addEvent(s.id, event);
      renderScenarios();
    }
  });
  add.appendChild(addBtn);
  card.appendChild(add);

  const ivRow = el("div", { class: "row" });
  ivRow.appendChild(el("span", { class: "iv-tag" }, "intervention"));
  const ivCode = el("input", {
    class: "iv-code", list: "vocab-codes",
    placeholder: "ICD-10 CM code, e.g. I63.9",
    value: s.intervention ? s.intervention.code : "",
  });
  ivRow.appendChild(ivCode);
  const ivSet = el("button", { class: "mini" }, "set");
  ivSet.addEventListener("click", () => {
    const code = (ivCode as HTMLInputElement).value.trim();
    store.setIntervention(s.id, code
      ? { date: "", system: "ICD10CM", code }
      : null);
    renderScenarios();
  });
  ivRow.appendChild(ivSet);
  if (s.intervention) {
    const clear = el("button", { class: "mini" }, "clear");
    clear.addEventListener("click", () => {
      store.setIntervention(s.id, null);
      renderScenarios();
    });
    ivRow.appendChild(clear);
  }
  card.appendChild(ivRow);

  const act = el("div", { class: "row" });
  const run = el("button", { class: "primary" },
    s.pendingRequest !== null ? "simulating..." : "Simulate") as HTMLButtonElement;
  run.disabled = s.pendingRequest !== null;
  run.addEventListener("click", () => void runScenario(s.id));
  act.appendChild(run);
  const pick = el("input", { type: "checkbox", title: "include in comparison" }) as HTMLInputElement;
  pick.checked = compareSelection.has(s.id);
  pick.addEventListener("change", () => {
    if (pick.checked && compareSelection.size < 4) compareSelection.add(s.id);
    else compareSelection.delete(s.id);
    renderScenarios();
    renderCompare();
  });
  act.appendChild(pick);
  act.appendChild(el("span", { class: "hint" }, "compare"));
  card.appendChild(act);

  if (s.error) card.appendChild(el("div", { class: "error" }, s.error));
  if (s.result) {
    const cost = costSummary(s.result.base);
    const sum = el("div", { class: "summary" });
    sum.appendChild(el("div", {},
      `predicted cost $${cost.predicted} ± ${cost.stdError} ` +
      `(${cost.completed}/${cost.nFutures} futures completed)`));
    const seedLine = el("div", { class: "seed" }, `seed ${cost.seed} `);
    const reuse = el("button", { class: "mini" }, "reuse seed");
    reuse.addEventListener("click", () => {
      (($("seed")) as HTMLInputElement).value = cost.seed;
    });
    seedLine.appendChild(reuse);
    sum.appendChild(seedLine);
    if (s.result.intervened) {
      const ivCost = costSummary(s.result.intervened);
      sum.appendChild(el("div", {},
        `intervened cost $${ivCost.predicted} ± ${ivCost.stdError}`));
    }
    card.appendChild(sum);
  }
  return card;
}

function renderScenarios(): void {
  const host = $("scenarios");
  host.textContent = "";
  for (const s of store.scenarios) host.appendChild(scenarioCard(s));
}

function conditionChoices(): string[] {
  const names = new Set<string>();
  for (const s of store.completedScenarios()) {
    for (const n of trackedConditions(s.result!.base)) names.add(n);
  }
  return [...names].sort();
}

function renderCompare(): void {
  const host = $("compare");
  host.textContent = "";
  const chosen = store.scenarios.filter(
    (s) => compareSelection.has(s.id) && s.result !== null);
  if (chosen.length === 0) {
    host.appendChild(el("p", { class: "hint" },
      "Simulate a scenario and tick 'compare' to see probability curves."));
    return;
  }
  const conditions = conditionChoices();
  if (conditions.length && !conditions.includes(compareCondition)) {
    compareCondition = conditions.includes("Parkinsons") ? "Parkinsons" : conditions[0];
  }
  const picker = el("div", { class: "row" });
  picker.appendChild(el("span", {}, "condition"));
  const sel = el("select") as HTMLSelectElement;
  for (const c of conditions) {
    const o = el("option", { value: c }, c) as HTMLOptionElement;
    if (c === compareCondition) o.selected = true;
    sel.appendChild(o);
  }
  sel.addEventListener("change", () => {
    compareCondition = sel.value;
    renderCompare();
  });
  picker.appendChild(sel);
  host.appendChild(picker);

  const arms = chosen.flatMap((s) =>
    s.result!.intervened
      ? comparisonArms(
          { seed: s.result!.seed, base: s.result!.base,
            intervened: s.result!.intervened, deltas: s.result!.deltas },
          s.label)
      : [{ label: s.label, bundle: s.result!.base }]);
  const { series, horizonMismatch } = curvesFor(arms, compareCondition);
  if (horizonMismatch) {
    host.appendChild(el("div", { class: "error" },
      "horizons differ between scenarios; showing common buckets only"));
  }
  const layout = DEFAULT_LAYOUT;
  const svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
  svg.setAttribute("width", String(layout.width));
  svg.setAttribute("height", String(layout.height));
  svg.setAttribute("class", "chart");
  const yMax = sharedYMax(series.map((s) => s.probs));
  series.forEach((s, i) => {
    const geom = curveGeometry(s.probs, layout, yMax);
    const path = document.createElementNS("http://www.w3.org/2000/svg", "path");
    path.setAttribute("d", geom.path);
    path.setAttribute("fill", "none");
    path.setAttribute("stroke", SERIES_COLORS[i % SERIES_COLORS.length]);
    path.setAttribute("stroke-width", "2");
    svg.appendChild(path);
  });
  if (series.length) {
    for (const t of axisTicks(series[0].probs.length, series[0].bucketDays)) {
      const label = document.createElementNS("http://www.w3.org/2000/svg", "text");
      label.setAttribute("x", String(layout.padLeft +
        (t.bucket * (layout.width - layout.padLeft - layout.padRight)) /
        Math.max(1, series[0].probs.length - 1)));
      label.setAttribute("y", String(layout.height - 8));
      label.setAttribute("class", "tick");
      label.textContent = t.label;
      svg.appendChild(label);
    }
  }
  host.appendChild(svg);

  const legend = el("div", { class: "legend" });
  series.forEach((s, i) => {
    const item = el("span", { class: "legend-item" },
      `${s.label} (any-time p=${s.anyTime})`);
    item.style.borderLeft = `10px solid ${SERIES_COLORS[i % SERIES_COLORS.length]}`;
    legend.appendChild(item);
  });
  host.appendChild(legend);

  for (const s of chosen) {
    if (!s.result!.deltas.length) continue;
    const table = el("table", { class: "deltas" });
    const caption = el("caption", {}, `${s.label}: intervention deltas`);
    table.appendChild(caption);
    const thead = el("tr");
    for (const h of ["condition", "p base", "p intervened", "delta", "std err"]) {
      thead.appendChild(el("th", {}, h));
    }
    table.appendChild(thead);
    for (const row of deltaTable(s.result!.deltas)) {
      const tr = el("tr", { class: row.significant ? "sig" : "" });
      tr.appendChild(el("td", {}, row.name));
      tr.appendChild(el("td", {}, row.pBase));
      tr.appendChild(el("td", {}, row.pIntervened));
      tr.appendChild(el("td", {}, row.delta));
      tr.appendChild(el("td", {}, row.stdError));
      table.appendChild(tr);
    }
    host.appendChild(table);
  }
}

function wireSession(): void {
  $("export").addEventListener("click", () => {
    const blob = new Blob([store.exportSession()], { type: "application/json" });
    const a = el("a", {
      href: URL.createObjectURL(blob), download: "whatif-session.json",
    }) as HTMLAnchorElement;
    a.click();
  });
  const fileInput = $("import-file") as HTMLInputElement;
  $("import").addEventListener("click", () => fileInput.click());
  fileInput.addEventListener("change", async () => {
    const file = fileInput.files?.[0];
    if (!file) return;
    try {
      store.importSession(await file.text());
      renderScenarios();
      renderCompare();
    } catch (err) {
      alert(`import failed: ${err}`);
    }
  });
}

async function init(): Promise<void> {
  $("add-scenario").addEventListener("click", () => {
    store.addScenario();
    renderScenarios();
  });
  wireSession();
  try {
    const health = await client.health();
    $("banner").textContent =
      `service ok - vocab ${health.vocab_size} tokens, ` +
      `default ${health.defaults.n_futures} futures`;
    const vocab: VocabSummary = await client.vocab();
    vocabSurfaces = vocab.surfaces;
    const datalist = $("vocab-codes");
    for (const surface of vocabSurfaces) {
      const sep = surface.indexOf(":");
      if (sep > 0 && !surface.startsWith("DEM") && !surface.startsWith("COST")
          && !surface.startsWith("GAP") && !surface.startsWith("DX-X")) {
        datalist.appendChild(el("option", { value: surface.slice(sep + 1) },
          surface));
      }
    }
  } catch {
    $("banner").textContent = "service unreachable - start `medseq serve` and reload";
    $("banner").classList.add("error");
  }
  const first = store.addScenario("70yo female");
  first.age = 70;
  first.sex = "F";
  renderScenarios();
  renderCompare();
}

void init();
