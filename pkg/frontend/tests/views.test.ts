// Pure render checks: these views draw exactly what an API response said.

import { describe, expect, it } from "vitest";

import type { Asset, Dt, Metric } from "../src/api";
import { renderCatalog } from "../src/views/catalog";
import { renderDtDetail } from "../src/views/detail";
import { renderFederation } from "../src/views/federation";
import { renderMetrics } from "../src/views/metrics";

function asset(over: Partial<Asset>): Asset {
  return {
    id: "ast-1",
    name: "thing",
    kind: "model",
    owner: "admin",
    visibility: "common",
    versions: [{ version: 1, content_hash: "h", manifest: {}, payload_ref: "p" }],
    created_at: 1,
    ...over,
  };
}

describe("catalog view", () => {
  it("badges remote assets and only those", () => {
    const view = renderCatalog([
      asset({ id: "ast-local" }),
      asset({ id: "ast-remote", remote: true }),
    ]);
    expect(view.querySelector("tr[data-asset-id='ast-local'] .badge.remote")).toBeNull();
    expect(view.querySelector("tr[data-asset-id='ast-remote'] .badge.remote")).toBeTruthy();
  });
});

describe("twin detail view", () => {
  it("highlights exactly the current phase in the lifecycle diagram", () => {
    const dt: Dt = {
      dt_id: "dt-1",
      name: "furnace",
      owner: "admin",
      lifecycle_spec: { enabled_phases: ["create", "execute", "reconfigure", "terminate"] },
      state: { current: "execute", history: [["create", 1]], state_snapshot: null },
      revision: 2,
    };
    const view = renderDtDetail(dt);
    const current = view.querySelectorAll(".phase.current");
    expect(current.length).toBe(1);
    expect((current[0] as HTMLElement).dataset.phase).toBe("execute");
    expect(view.querySelector(".revision")?.textContent).toBe("2");
  });

  it("omits phases the twin did not enable", () => {
    const dt: Dt = {
      dt_id: "dt-2",
      name: "minimal",
      owner: "admin",
      lifecycle_spec: { enabled_phases: ["create", "execute"] },
      state: { current: "initial", history: [], state_snapshot: null },
    };
    const phases = [...renderDtDetail(dt).querySelectorAll(".phase")].map(
      (n) => (n as HTMLElement).dataset.phase,
    );
    expect(phases).toEqual(["initial", "create", "execute"]);
  });
});

describe("federation view", () => {
  it("lists links with cursors and remote twins separately", () => {
    const view = renderFederation(
      {
        links: [{ backend_id: "hub", endpoint: "http://hub", sync_interval_s: 0, cursor: 7 }],
        lastSync: {},
        fetchedAt: 1,
      },
      [
        { dt_id: "dt-local", name: "mine", owner: "admin" },
        { dt_id: "dt-far", name: "theirs", owner: "them", remote: true, instance: "beta" },
      ],
    );
    expect(view.querySelector("tr[data-backend-id='hub'] .cursor")?.textContent).toBe("7");
    const remote = view.querySelectorAll("ul.remote-twins li");
    expect(remote.length).toBe(1);
    expect((remote[0] as HTMLElement).dataset.dtId).toBe("dt-far");
  });
});

describe("metrics view", () => {
  it("draws one chart per metric name", () => {
    const series: Metric[] = [
      { dt_id: "dt-1", name: "temp", value: 20, ts: 1, labels: {} },
      { dt_id: "dt-1", name: "temp", value: 22, ts: 2, labels: {} },
      { dt_id: "dt-1", name: "pressure", value: 5, ts: 1, labels: {} },
    ];
    const view = renderMetrics(series);
    expect(view.querySelectorAll("figure.metric-chart").length).toBe(2);
    const temp = view.querySelector("figure[data-metric='temp'] polyline");
    expect(temp?.getAttribute("points")?.split(" ").length).toBe(2);
  });
});
