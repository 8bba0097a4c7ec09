// Federation panel: linked backends with cursors and last sync results, and
// the twins announced by other instances.

import type { Dt } from "../api";
import type { FederationSnapshot } from "../store";
import { el, fmtTime } from "../dom";

export interface FederationCallbacks {
  onSync?: (backendId: string) => void;
}

export function renderFederation(
  snapshot: FederationSnapshot,
  dts: Dt[],
  callbacks: FederationCallbacks = {},
): HTMLElement {
  const remoteTwins = dts.filter((dt) => dt.remote);
  return el(
    "section.federation",
    {},
    el("h2", {}, "federation"),
    el(
      "table.links",
      {},
      el(
        "thead",
        {},
        el("tr", {}, ...["backend", "endpoint", "cursor", "last sync", ""].map((h) => el("th", {}, h))),
      ),
      el(
        "tbody",
        {},
        ...snapshot.links.map((link) => {
          const sync = snapshot.lastSync[link.backend_id];
          return el(
            "tr",
            { dataset: { backendId: link.backend_id } },
            el("td", {}, link.backend_id),
            el("td", {}, el("code", {}, link.endpoint)),
            el("td.cursor", {}, String(link.cursor)),
            el("td.last-sync", {}, sync ? `${sync.absorbed} absorbed ${fmtTime(sync.at / 1000)}` : "—"),
            el(
              "td",
              {},
              el("button.sync", { onclick: () => callbacks.onSync?.(link.backend_id) }, "sync"),
            ),
          );
        }),
      ),
    ),
    el("h3", {}, `remote twins (${remoteTwins.length})`),
    el(
      "ul.remote-twins",
      {},
      ...remoteTwins.map((dt) =>
        el(
          "li",
          { dataset: { dtId: dt.dt_id } },
          el("code", {}, dt.dt_id),
          ` ${dt.name} `,
          el("span.badge.remote", {}, dt.instance ?? "remote"),
        ),
      ),
    ),
  );
}
