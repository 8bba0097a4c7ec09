// Compose wizard: pick assets, pin versions, edit the config against live
// validation, submit. Submit stays disabled until the API has called the
// current config valid, and every diagnostic is anchored to its config path.

import { Api, ApiError, Asset, AssetRef, Diagnostic, Dt } from "../api";
import { el, clear } from "../dom";

export interface WizardOptions {
  onCreated?: (dt: Dt) => void;
}

interface Pick {
  asset: Asset;
  version: number;
}

const DEFAULT_CONFIG = `{
  "executor": {
    "target": "process",
    "mode": "oneoff",
    "time_limit_s": 60,
    "command": ["python3", "twin.py"]
  },
  "channels": [
    {"role": "pt", "topic": "twin.state", "direction": "out"}
  ]
}`;

export class ComposeWizard {
  readonly root = el("section.wizard");
  private step: 1 | 2 | 3 = 1;
  private assets: Asset[] = [];
  private filter = "";
  private picks = new Map<string, Pick>();
  private name = "";
  private configText = DEFAULT_CONFIG;
  private diagnostics: Diagnostic[] = [];
  private warnings: Diagnostic[] = [];
  private validated = false; // the API approved the *current* text
  private submitting = false;
  private notice: string | null = null;

  constructor(
    private readonly api: Api,
    private readonly options: WizardOptions = {},
  ) {
    void this.reloadAssets();
    this.render();
  }

  async reloadAssets(): Promise<void> {
    const { assets } = await this.api.listAssets({ remote: true });
    this.assets = assets;
    this.render();
  }

  private togglePick(asset: Asset): void {
    if (this.picks.has(asset.id)) {
      this.picks.delete(asset.id);
    } else {
      const latest = asset.versions[asset.versions.length - 1];
      this.picks.set(asset.id, { asset, version: latest?.version ?? 1 });
    }
    this.render();
  }

  private async pull(asset: Asset): Promise<void> {
    // Fetching a remote asset through the catalog endpoint makes the
    // instance pull and cache its payload.
    this.notice = `pulling ${asset.name}…`;
    this.render();
    try {
      await this.api.getAsset(asset.id);
      this.notice = `pulled ${asset.name}`;
    } catch (err) {
      this.notice = err instanceof Error ? err.message : String(err);
    }
    await this.reloadAssets();
  }

  refs(): AssetRef[] {
    return [...this.picks.values()].map(({ asset, version }) => ({
      asset_id: asset.id,
      pinned_version: version,
    }));
  }

  parsedConfig(): Record<string, unknown> | null {
    try {
      const doc = JSON.parse(this.configText);
      return typeof doc === "object" && doc !== null && !Array.isArray(doc) ? doc : null;
    } catch {
      return null;
    }
  }

  async validateNow(): Promise<void> {
    const config = this.parsedConfig();
    if (config === null) {
      this.diagnostics = [{ path: "(json)", message: "config is not a JSON object" }];
      this.warnings = [];
      this.validated = false;
      this.render();
      return;
    }
    const result = await this.api.validateConfig(config, this.refs());
    this.diagnostics = result.diagnostics;
    this.warnings = result.warnings;
    this.validated = result.valid;
    this.render();
  }

  canSubmit(): boolean {
    return (
      this.validated &&
      this.name.trim() !== "" &&
      this.picks.size > 0 &&
      !this.submitting &&
      this.parsedConfig() !== null
    );
  }

  async submit(): Promise<Dt | null> {
    if (!this.canSubmit()) return null;
    this.submitting = true;
    this.render();
    try {
      const dt = await this.api.composeDt(this.name.trim(), this.refs(), this.parsedConfig()!);
      this.notice = `composed ${dt.dt_id}`;
      this.options.onCreated?.(dt);
      return dt;
    } catch (err) {
      if (err instanceof ApiError) {
        const extra = (err.detail.diagnostics as Diagnostic[] | undefined) ?? [];
        this.diagnostics = extra.length ? extra : [{ path: "(submit)", message: err.message }];
        this.validated = false;
      } else {
        this.notice = err instanceof Error ? err.message : String(err);
      }
      return null;
    } finally {
      this.submitting = false;
      this.render();
    }
  }

  goto(step: 1 | 2 | 3): void {
    this.step = step;
    this.render();
  }

  private renderAssetStep(): HTMLElement {
    const visible = this.assets.filter(
      (a) => !this.filter || a.name.includes(this.filter) || a.kind.includes(this.filter),
    );
    return el(
      "div.step.step-assets",
      {},
      el("input.filter", {
        placeholder: "filter by name or kind",
        value: this.filter,
        oninput: (e: Event) => {
          this.filter = (e.target as HTMLInputElement).value;
          this.render();
        },
      }),
      el(
        "ul.asset-list",
        {},
        ...visible.map((asset) =>
          el(
            "li",
            { dataset: { assetId: asset.id } },
            el("input", {
              type: "checkbox",
              checked: this.picks.has(asset.id),
              dataset: { assetId: asset.id },
              onchange: () => this.togglePick(asset),
            }),
            el("span.asset-name", {}, asset.name),
            el("span.asset-kind", {}, asset.kind),
            asset.remote ? el("span.badge.remote", {}, "remote") : null,
            asset.remote
              ? el(
                  "button.pull",
                  { dataset: { assetId: asset.id }, onclick: () => void this.pull(asset) },
                  "pull",
                )
              : null,
          ),
        ),
      ),
      el(
        "button.next",
        { disabled: this.picks.size === 0, onclick: () => this.goto(2) },
        `pin versions (${this.picks.size} selected)`,
      ),
    );
  }

  private renderVersionStep(): HTMLElement {
    return el(
      "div.step.step-versions",
      {},
      ...[...this.picks.values()].map(({ asset, version }) =>
        el(
          "label.pin",
          { dataset: { assetId: asset.id } },
          el("span", {}, `${asset.name} `),
          el(
            "select",
            {
              value: String(version),
              onchange: (e: Event) => {
                const pick = this.picks.get(asset.id);
                if (pick) pick.version = Number((e.target as HTMLSelectElement).value);
              },
            },
            ...asset.versions.map((v) =>
              el("option", { value: String(v.version), selected: v.version === version }, `v${v.version}`),
            ),
          ),
        ),
      ),
      el("button.back", { onclick: () => this.goto(1) }, "back"),
      el("button.next", { onclick: () => this.goto(3) }, "edit config"),
    );
  }

  private renderConfigStep(): HTMLElement {
    return el(
      "div.step.step-config",
      {},
      el("input.dt-name", {
        placeholder: "twin name",
        value: this.name,
        oninput: (e: Event) => {
          this.name = (e.target as HTMLInputElement).value;
          this.render();
        },
      }),
      el("textarea.config", {
        value: this.configText,
        rows: 14,
        spellcheck: false,
        oninput: (e: Event) => {
          this.configText = (e.target as HTMLTextAreaElement).value;
          this.validated = false; // edits invalidate the last verdict
          this.render();
        },
      }),
      el(
        "ul.diagnostics",
        {},
        ...this.diagnostics.map((d) =>
          el("li.diagnostic", { dataset: { path: d.path } }, el("code", {}, d.path), ` ${d.message}`),
        ),
        ...this.warnings.map((d) =>
          el("li.warning", { dataset: { path: d.path } }, el("code", {}, d.path), ` ${d.message}`),
        ),
      ),
      el("button.back", { onclick: () => this.goto(2) }, "back"),
      el("button.validate", { onclick: () => void this.validateNow() }, "validate"),
      el(
        "button.submit",
        { disabled: !this.canSubmit(), onclick: () => void this.submit() },
        this.submitting ? "composing…" : "compose twin",
      ),
    );
  }

  render(): void {
    clear(this.root).append(
      el(
        "nav.steps",
        {},
        ...[1, 2, 3].map((n) =>
          el(
            "span.step-tab",
            { className: `step-tab${this.step === n ? " active" : ""}` },
            ["select assets", "pin versions", "configure"][n - 1],
          ),
        ),
      ),
      this.step === 1
        ? this.renderAssetStep()
        : this.step === 2
          ? this.renderVersionStep()
          : this.renderConfigStep(),
      this.notice ? el("p.notice", {}, this.notice) : el("p.notice.empty", {}),
    );
  }
}
