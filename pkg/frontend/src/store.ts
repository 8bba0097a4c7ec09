// Single immutable snapshot per concern; every write replaces the whole
// snapshot in one assignment, so a subscriber can never observe a half-updated
// poll (the API may answer out of order, the render never tears).

import type { Asset, BackendLink, Dt, Job } from "./api";

export interface CatalogSnapshot {
  assets: Asset[];
  fetchedAt: number;
}

export interface TwinsSnapshot {
  dts: Dt[];
  fetchedAt: number;
}

export interface JobsSnapshot {
  jobs: Job[];
  fetchedAt: number;
}

export interface FederationSnapshot {
  links: BackendLink[];
  lastSync: Record<string, { cursor: number; absorbed: number; at: number }>;
  fetchedAt: number;
}

export interface AppState {
  catalog: CatalogSnapshot;
  twins: TwinsSnapshot;
  jobs: JobsSnapshot;
  federation: FederationSnapshot;
  error: string | null;
}

export const emptyState = (): AppState => ({
  catalog: { assets: [], fetchedAt: 0 },
  twins: { dts: [], fetchedAt: 0 },
  jobs: { jobs: [], fetchedAt: 0 },
  federation: { links: [], lastSync: {}, fetchedAt: 0 },
  error: null,
});

export type Listener = (state: AppState) => void;

export class Store {
  private state: AppState = emptyState();
  private listeners = new Set<Listener>();

  get(): AppState {
    return this.state;
  }

  // Atomic swap: compute the next state from the previous one, publish once.
  set(update: Partial<AppState>): void {
    this.state = { ...this.state, ...update };
    for (const listener of this.listeners) listener(this.state);
  }

  subscribe(listener: Listener): () => void {
    this.listeners.add(listener);
    return () => this.listeners.delete(listener);
  }
}
