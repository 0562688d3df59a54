import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";
import { ServiceClient, ServiceError } from "../src/api.js";

const here = new URL(".", import.meta.url).pathname;
const simulateBody = readFileSync(`${here}/fixtures/simulate_response.json`, "utf-8");

function fakeFetch(status: number, body: string) {
  const calls: { url: string; init?: RequestInit }[] = [];
  const impl = async (url: string, init?: RequestInit) => {
    calls.push({ url, init });
    return new Response(body, {
      status,
      headers: { "content-type": "application/json" },
    });
  };
  return { impl, calls };
}

describe("ServiceClient", () => {
  it("posts the seed and knobs through unchanged", async () => {
    const { impl, calls } = fakeFetch(200, simulateBody);
    const client = new ServiceClient("http://svc", impl);
    await client.simulate(
      { age: 70, sex: "F", events: [] },
      { seed: 4242, n_futures: 16, horizon_days: 365 },
    );
    expect(calls[0].url).toBe("http://svc/v1/simulate");
    const sent = JSON.parse(String(calls[0].init?.body));
    expect(sent.seed).toBe(4242);
    expect(sent.n_futures).toBe(16);
    expect(sent.history.age).toBe(70);
  });

  it("returns the parsed bundle with the echoed seed", async () => {
    const { impl } = fakeFetch(200, simulateBody);
    const client = new ServiceClient("", impl);
    const bundle = await client.simulate(["DEM:AGE_70", "DEM:SEX_F"], {});
    expect(bundle.seed).toBe(JSON.parse(simulateBody).seed);
    expect(bundle.event_probs.length).toBeGreaterThan(0);
  });

  it("builds the intervene body with both parts", async () => {
    const { impl, calls } = fakeFetch(200, JSON.stringify({
      seed: 1, base: JSON.parse(simulateBody),
      intervened: JSON.parse(simulateBody), deltas: [],
    }));
    const client = new ServiceClient("", impl);
    await client.intervene(
      { age: 70, sex: "F", events: [] },
      { system: "ICD10CM", code: "I63.9" },
      { seed: 1, n_futures: 8 },
    );
    const sent = JSON.parse(String(calls[0].init?.body));
    expect(sent.intervention.code).toBe("I63.9");
    expect(sent.simulate.seed).toBe(1);
  });

  it("surfaces service errors with status and detail", async () => {
    const { impl } = fakeFetch(400, JSON.stringify({ detail: "unknown code" }));
    const client = new ServiceClient("", impl);
    await expect(client.simulate(["NOPE:1"], {})).rejects.toThrowError(ServiceError);
    try {
      await client.simulate(["NOPE:1"], {});
    } catch (err) {
      expect((err as ServiceError).status).toBe(400);
      expect((err as ServiceError).message).toBe("unknown code");
    }
  });
});
