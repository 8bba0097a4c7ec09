// Shell: session form, hash router, background polls, and view wiring.
// Routes: #/catalog  #/compose  #/dts/<id>  #/federation

import { Api, Session } from "./api";
import { Store } from "./store";
import { startPolls, pollCatalog, pollJobs, Poller } from "./poll";
import { el, clear } from "./dom";
import { renderCatalog } from "./views/catalog";
import { ComposeWizard } from "./views/wizard";
import { ExecutionConsole } from "./views/console";
import { renderDtDetail } from "./views/detail";
import { renderFederation } from "./views/federation";
import { renderMetrics } from "./views/metrics";

const SESSION_KEY = "twinforge-session";

function loadSession(): Session | null {
  try {
    const raw = localStorage.getItem(SESSION_KEY);
    if (!raw) return null;
    const doc = JSON.parse(raw);
    return typeof doc.endpoint === "string" && typeof doc.token === "string" ? doc : null;
  } catch {
    return null;
  }
}

function sessionForm(onReady: (session: Session) => void): HTMLElement {
  const endpoint = el("input", { placeholder: "http://127.0.0.1:8080", value: location.origin }) as HTMLInputElement;
  const token = el("input", { placeholder: "token", type: "password" }) as HTMLInputElement;
  return el(
    "form.session",
    {
      onsubmit: (e: Event) => {
        e.preventDefault();
        const session = { endpoint: endpoint.value.trim(), token: token.value.trim() };
        localStorage.setItem(SESSION_KEY, JSON.stringify(session));
        onReady(session);
      },
    },
    el("h1", {}, "twinforge"),
    el("label", {}, "instance ", endpoint),
    el("label", {}, "token ", token),
    el("button", { type: "submit" }, "connect"),
  );
}

export class App {
  readonly api: Api;
  readonly store = new Store();
  private polls: Poller | null = null;
  private console_: ExecutionConsole | null = null;
  private wizard: ComposeWizard | null = null;

  constructor(
    readonly session: Session,
    readonly mount: HTMLElement,
  ) {
    this.api = new Api(session);
    this.store.subscribe(() => this.renderRoute());
    window.addEventListener("hashchange", () => this.renderRoute());
  }

  start(): void {
    this.polls = startPolls(this.api, this.store);
    this.renderRoute();
  }

  stop(): void {
    this.polls?.stop();
    this.console_?.dispose();
  }

  private nav(): HTMLElement {
    return el(
      "nav.topnav",
      {},
      el("a", { href: "#/catalog" }, "catalog"),
      el("a", { href: "#/compose" }, "compose"),
      el("a", { href: "#/federation" }, "federation"),
      this.store.get().error ? el("span.conn-error", {}, this.store.get().error) : null,
    );
  }

  renderRoute(): void {
    const state = this.store.get();
    const hash = location.hash || "#/catalog";
    const body = el("main.view");

    const dtMatch = hash.match(/^#\/dts\/([^/]+)$/);
    if (dtMatch) {
      const dtId = dtMatch[1];
      if (!this.console_ || this.console_.dtId !== dtId) {
        this.console_?.dispose();
        this.console_ = new ExecutionConsole(this.api, dtId);
        void this.console_.refresh();
      }
      const dt = state.twins.dts.find((d) => d.dt_id === dtId);
      if (dt && !dt.remote) body.append(renderDtDetail(dt));
      body.append(this.console_.root);
      void this.api.getMetrics(dtId).then(({ metrics }) => {
        if (metrics.length) body.append(renderMetrics(metrics));
      });
    } else if (hash.startsWith("#/compose")) {
      if (!this.wizard) {
        this.wizard = new ComposeWizard(this.api, {
          onCreated: (dt) => {
            this.wizard = null;
            location.hash = `#/dts/${dt.dt_id}`;
            void pollJobs(this.api, this.store);
          },
        });
      }
      body.append(this.wizard.root);
    } else if (hash.startsWith("#/federation")) {
      body.append(
        renderFederation(state.federation, state.twins.dts, {
          onSync: (backendId) => {
            void this.api.syncBackend(backendId).then((result) => {
              const federation = { ...this.store.get().federation };
              federation.lastSync = {
                ...federation.lastSync,
                [backendId]: { cursor: result.cursor, absorbed: result.absorbed, at: Date.now() },
              };
              this.store.set({ federation });
              void pollCatalog(this.api, this.store);
            });
          },
        }),
      );
    } else {
      body.append(
        renderCatalog(state.catalog.assets, { onCompose: () => (location.hash = "#/compose") }),
        el(
          "section.twin-list",
          {},
          el("h2", {}, `twins (${state.twins.dts.length})`),
          el(
            "ul",
            {},
            ...state.twins.dts.map((dt) =>
              el(
                "li",
                { dataset: { dtId: dt.dt_id } },
                dt.remote
                  ? el("span", {}, `${dt.name} `, el("span.badge.remote", {}, dt.instance ?? "remote"))
                  : el("a", { href: `#/dts/${dt.dt_id}` }, dt.name),
                el("span.phase-chip", { dataset: { phase: dt.state?.current ?? "" } }, dt.state?.current ?? ""),
              ),
            ),
          ),
        ),
      );
    }

    clear(this.mount).append(this.nav(), body);
  }
}

export function boot(mount: HTMLElement): void {
  const session = loadSession();
  if (session) {
    new App(session, mount).start();
  } else {
    clear(mount).append(
      sessionForm((fresh) => {
        clear(mount);
        new App(fresh, mount).start();
      }),
    );
  }
}
