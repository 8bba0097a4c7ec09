// Background polling. Each tick gathers every response it needs first, then
// commits one atomic store update; overlapping ticks are skipped rather than
// interleaved, so two in-flight polls can never mix into a torn render.

import type { Api } from "./api";
import type { Store } from "./store";

export const JOB_POLL_MS = 2_000;
export const CATALOG_POLL_MS = 10_000;

export async function pollJobs(api: Api, store: Store): Promise<void> {
  const [{ jobs }, { dts }] = await Promise.all([api.listJobs(), api.listDts()]);
  const now = Date.now();
  store.set({
    jobs: { jobs, fetchedAt: now },
    twins: { dts, fetchedAt: now },
    error: null,
  });
}

export async function pollCatalog(api: Api, store: Store): Promise<void> {
  const [{ assets }, { links }] = await Promise.all([
    api.listAssets({ remote: true }),
    api.links(),
  ]);
  const now = Date.now();
  store.set({
    catalog: { assets, fetchedAt: now },
    federation: { ...store.get().federation, links, fetchedAt: now },
    error: null,
  });
}

export interface Poller {
  stop: () => void;
}

function loop(tick: () => Promise<void>, store: Store, intervalMs: number): Poller {
  let inFlight = false;
  let timer: ReturnType<typeof setInterval> | null = null;
  const run = async () => {
    if (inFlight) return; // never two overlapping polls of the same kind
    inFlight = true;
    try {
      await tick();
    } catch (err) {
      store.set({ error: err instanceof Error ? err.message : String(err) });
    } finally {
      inFlight = false;
    }
  };
  void run();
  timer = setInterval(run, intervalMs);
  return {
    stop: () => {
      if (timer !== null) clearInterval(timer);
      timer = null;
    },
  };
}

export function startPolls(api: Api, store: Store): Poller {
  const jobs = loop(() => pollJobs(api, store), store, JOB_POLL_MS);
  const catalog = loop(() => pollCatalog(api, store), store, CATALOG_POLL_MS);
  return {
    stop: () => {
      jobs.stop();
      catalog.stop();
    },
  };
}
