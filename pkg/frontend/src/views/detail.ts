// Twin detail: the lifecycle relation drawn with the current phase lit up,
// plus refs, config revision, peers, and the phase history — all taken from
// one describe response.

import type { Dt } from "../api";
import { el, fmtTime } from "../dom";

const PHASE_ORDER = ["initial", "create", "execute", "reconfigure", "terminate"];

export function renderDtDetail(dt: Dt): HTMLElement {
  const current = dt.state?.current ?? "initial";
  const enabled = new Set(dt.lifecycle_spec?.enabled_phases ?? []);
  enabled.add("initial");
  return el(
    "section.dt-detail",
    {},
    el("h2", {}, dt.name, " ", el("code", {}, dt.dt_id)),
    el(
      "div.lifecycle-diagram",
      {},
      ...PHASE_ORDER.filter((p) => enabled.has(p)).flatMap((phase, i) => [
        i > 0 ? el("span.arrow", {}, "→") : null,
        el(
          "span.phase",
          {
            dataset: { phase },
            className: `phase${phase === current ? " current" : ""}`,
          },
          phase,
        ),
      ]),
    ),
    el(
      "dl.dt-facts",
      {},
      el("dt", {}, "owner"),
      el("dd", {}, dt.owner),
      el("dt", {}, "revision"),
      el("dd.revision", {}, String(dt.revision ?? 1)),
      el("dt", {}, "peers"),
      el("dd", {}, (dt.peers ?? []).join(", ") || "—"),
      el("dt", {}, "snapshot"),
      el("dd", {}, dt.state?.state_snapshot ?? "—"),
    ),
    el(
      "ul.refs",
      {},
      ...(dt.asset_refs ?? []).map((ref) =>
        el(
          "li",
          { dataset: { assetId: ref.asset_id } },
          el("code", {}, `${ref.asset_id}:${ref.pinned_version}`),
          ref.backend ? el("span.badge.remote", {}, `@${ref.backend}`) : null,
        ),
      ),
    ),
    el(
      "details.config",
      {},
      el("summary", {}, "config"),
      el("pre", {}, JSON.stringify(dt.config ?? {}, null, 2)),
    ),
    el(
      "ol.history",
      {},
      ...(dt.state?.history ?? []).map(([phase, at]) =>
        el("li", {}, el("code", {}, phase), ` at ${fmtTime(at)}`),
      ),
    ),
  );
}
