// Asset catalog: local and remote records side by side, remote ones badged.
// Pure render from the latest catalog snapshot.

import type { Asset } from "../api";
import { el, fmtTime } from "../dom";

export interface CatalogCallbacks {
  onCompose?: () => void;
}

export function renderCatalog(assets: Asset[], callbacks: CatalogCallbacks = {}): HTMLElement {
  return el(
    "section.catalog",
    {},
    el(
      "header",
      {},
      el("h2", {}, `catalog (${assets.length})`),
      el("button.compose", { onclick: () => callbacks.onCompose?.() }, "compose twin"),
    ),
    el(
      "table.assets",
      {},
      el(
        "thead",
        {},
        el(
          "tr",
          {},
          ...["name", "kind", "visibility", "versions", "owner", "published", ""].map((h) =>
            el("th", {}, h),
          ),
        ),
      ),
      el(
        "tbody",
        {},
        ...assets.map((asset) =>
          el(
            "tr",
            { dataset: { assetId: asset.id } },
            el("td", {}, asset.name),
            el("td", {}, asset.kind),
            el("td", {}, asset.visibility),
            el("td", {}, String(asset.versions.length)),
            el("td", {}, asset.owner),
            el("td", {}, fmtTime(asset.created_at)),
            el("td", {}, asset.remote ? el("span.badge.remote", {}, "remote") : ""),
          ),
        ),
      ),
    ),
  );
}
