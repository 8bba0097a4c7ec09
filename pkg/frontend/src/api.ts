// Typed client for the instance HTTP API. Every view binds to data returned
// from here — the UI never fabricates state of its own.

export interface Session {
  endpoint: string;
  token: string;
}

export interface AssetVersion {
  version: number;
  content_hash: string;
  manifest: Record<string, unknown>;
  payload_ref: string;
}

export interface Asset {
  id: string;
  name: string;
  kind: string;
  owner: string;
  visibility: "private" | "common";
  versions: AssetVersion[];
  created_at: number;
  remote?: boolean;
}

export interface AssetRef {
  asset_id: string;
  pinned_version?: number;
  backend?: string | null;
}

export interface Diagnostic {
  path: string;
  message: string;
}

export interface ValidateResult {
  valid: boolean;
  diagnostics: Diagnostic[];
  warnings: Diagnostic[];
}

export interface DtState {
  current: string;
  history: [string, number][];
  state_snapshot: string | null;
}

export interface Dt {
  dt_id: string;
  name: string;
  owner: string;
  asset_refs?: AssetRef[];
  config?: Record<string, unknown>;
  lifecycle_spec?: { enabled_phases: string[] };
  state?: DtState;
  allowed_transitions?: string[];
  peers?: string[];
  revision?: number;
  remote?: boolean;
  instance?: string;
}

export interface JobMode {
  kind: "oneoff" | "continuous";
  time_limit_s?: number;
  max_restarts?: number | null;
  backoff_s?: number;
}

export interface Job {
  job_id: string;
  dt_id: string;
  mode: JobMode;
  trigger: string;
  status: string;
  submitted_at: number;
  started_at: number | null;
  ended_at: number | null;
  restart_count: number;
  exit_code: number | null;
  owner: string | null;
}

export interface BackendLink {
  backend_id: string;
  endpoint: string;
  sync_interval_s: number;
  cursor: number;
}

export interface Metric {
  dt_id: string;
  name: string;
  value: number;
  ts: number;
  labels: Record<string, string>;
}

export interface Health {
  status: string;
  instance_id: string;
  broker: string;
  dts: number;
  backends: string[];
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
    readonly detail: Record<string, unknown> = {},
  ) {
    super(message);
  }
}

export interface LogFollower {
  done: Promise<void>;
  cancel: () => void;
}

export class Api {
  constructor(readonly session: Session) {}

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    params?: Record<string, string>,
  ): Promise<T> {
    const url = new URL(`/api/v1${path}`, this.session.endpoint);
    for (const [key, value] of Object.entries(params ?? {})) {
      if (value !== "") url.searchParams.set(key, value);
    }
    const res = await globalThis.fetch(url, {
      method,
      headers: {
        Authorization: `Bearer ${this.session.token}`,
        ...(body !== undefined ? { "Content-Type": "application/json" } : {}),
      },
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const doc = await res.json();
    if (!res.ok) {
      const err = doc?.error ?? {};
      throw new ApiError(
        res.status,
        err.code ?? "error",
        err.message ?? res.statusText,
        err.detail ?? {},
      );
    }
    return doc as T;
  }

  health(): Promise<Health> {
    return this.request("GET", "/health");
  }

  listAssets(opts: { kind?: string; name?: string; remote?: boolean } = {}): Promise<{ assets: Asset[] }> {
    return this.request("GET", "/assets", undefined, {
      kind: opts.kind ?? "",
      name: opts.name ?? "",
      remote: opts.remote ? "1" : "",
    });
  }

  getAsset(assetId: string, version?: number): Promise<Asset & { payload_b64: string }> {
    return this.request("GET", `/assets/${assetId}`, undefined, {
      version: version ? String(version) : "",
    });
  }

  composeDt(
    name: string,
    refs: AssetRef[],
    config: Record<string, unknown>,
    lifecycle?: { enabled_phases: string[] },
  ): Promise<Dt> {
    return this.request("POST", "/dts", { name, refs, config, lifecycle });
  }

  listDts(): Promise<{ dts: Dt[] }> {
    return this.request("GET", "/dts");
  }

  showDt(dtId: string): Promise<Dt> {
    return this.request("GET", `/dts/${dtId}`);
  }

  transitionDt(dtId: string, target: string): Promise<Dt> {
    return this.request("POST", `/dts/${dtId}/transition`, { target });
  }

  reconfigureDt(dtId: string, config: Record<string, unknown>): Promise<Dt> {
    return this.request("PATCH", `/dts/${dtId}/config`, { config });
  }

  validateConfig(config: Record<string, unknown>, refs?: AssetRef[]): Promise<ValidateResult> {
    return this.request("POST", "/config/validate", { config, refs });
  }

  submitJob(
    dtId: string,
    opts: { mode?: string; time_limit_s?: number; restart?: Record<string, unknown> } = {},
  ): Promise<Job> {
    return this.request("POST", "/jobs", { dt_id: dtId, ...opts });
  }

  getJob(jobId: string): Promise<Job> {
    return this.request("GET", `/jobs/${jobId}`);
  }

  listJobs(dtId?: string): Promise<{ jobs: Job[] }> {
    return this.request("GET", "/jobs", undefined, { dt_id: dtId ?? "" });
  }

  terminateJob(jobId: string, graceS?: number): Promise<Job> {
    return this.request("DELETE", `/jobs/${jobId}`, undefined, {
      grace_s: graceS !== undefined ? String(graceS) : "",
    });
  }

  links(): Promise<{ links: BackendLink[] }> {
    return this.request("GET", "/federation/links");
  }

  syncBackend(backendId: string): Promise<{ backend_id: string; cursor: number; absorbed: number }> {
    return this.request("POST", `/federation/sync/${backendId}`);
  }

  pullAsset(backend: string, assetId: string, version?: number): Promise<{ asset_id: string; bytes: number }> {
    return this.request("POST", "/federation/pull", { backend, asset_id: assetId, version });
  }

  getMetrics(dtId: string, name?: string): Promise<{ metrics: Metric[] }> {
    return this.request("GET", `/metrics/${dtId}`, undefined, { name: name ?? "" });
  }

  // Incremental fetch over the follow stream: each complete line is handed to
  // onLine as it arrives; `done` resolves when the server closes the stream.
  followLogs(jobId: string, onLine: (line: string) => void, follow = true): LogFollower {
    const url = new URL(`/api/v1/jobs/${jobId}/logs`, this.session.endpoint);
    if (follow) url.searchParams.set("follow", "1");
    const controller = new AbortController();
    const done = (async () => {
      const res = await globalThis.fetch(url, {
        headers: { Authorization: `Bearer ${this.session.token}` },
        signal: controller.signal,
      });
      if (!res.ok || !res.body) {
        const doc = await res.json().catch(() => ({}));
        const err = doc?.error ?? {};
        throw new ApiError(res.status, err.code ?? "error", err.message ?? res.statusText);
      }
      const reader = res.body.getReader();
      const decoder = new TextDecoder();
      let buffer = "";
      for (;;) {
        const { value, done: eof } = await reader.read();
        if (eof) break;
        buffer += decoder.decode(value, { stream: true });
        for (;;) {
          const nl = buffer.indexOf("\n");
          if (nl < 0) break;
          onLine(buffer.slice(0, nl));
          buffer = buffer.slice(nl + 1);
        }
      }
      if (buffer) onLine(buffer);
    })().catch((err) => {
      if (!controller.signal.aborted) throw err;
    });
    return { done, cancel: () => controller.abort() };
  }
}
