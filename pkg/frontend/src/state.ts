// View state and its pure transitions. Numbers shown anywhere in the UI come
// straight from API payloads; the only arithmetic here is the color range
// (min/max of the means on screen), which parameterizes the ramp exactly the
// way the server-side renderer defaults its own cell coloring.

import type { ProductInfo, ZonalRow } from "./api.js";

export type ViewState = {
  product: string;
  measure: string;
  timestamps: string[];
  tsIndex: number;
  selection: Set<string>;
  label: string;
};

export function initialState(): ViewState {
  return {
    product: "",
    measure: "",
    timestamps: [],
    tsIndex: -1,
    selection: new Set(),
    label: "",
  };
}

/** Derived indices the product's roles support, then the raw bands. */
export function measureChoices(p: ProductInfo): string[] {
  const roles = p.band_roles ?? {};
  const out: string[] = [];
  if (roles.red && roles.nir) out.push("ndvi");
  if (roles.red && roles.nir && roles.blue) out.push("evi");
  for (const b of p.bands) out.push(b.name);
  return out;
}

/**
 * Install the timestamps the service reported for the current selection.
 * The selected timestamp must stay one of them: keep it when still present,
 * otherwise clamp to the newest.
 */
export function withTimestamps(state: ViewState, timestamps: string[]): ViewState {
  const prev = state.tsIndex >= 0 ? state.timestamps[state.tsIndex] : undefined;
  let idx = prev === undefined ? -1 : timestamps.indexOf(prev);
  if (idx < 0) idx = timestamps.length - 1;
  return { ...state, timestamps, tsIndex: idx };
}

export function selectedTimestamp(state: ViewState): string | null {
  return state.tsIndex >= 0 ? (state.timestamps[state.tsIndex] ?? null) : null;
}

export function toggleSelection(state: ViewState, pid: string): ViewState {
  const selection = new Set(state.selection);
  if (selection.has(pid)) selection.delete(pid);
  else selection.add(pid);
  return { ...state, selection };
}

export function extendSelection(state: ViewState, pids: Iterable<string>): ViewState {
  const selection = new Set(state.selection);
  for (const pid of pids) selection.add(pid);
  return { ...state, selection };
}

export function clearSelection(state: ViewState): ViewState {
  return { ...state, selection: new Set() };
}

export function canSubmit(state: ViewState): boolean {
  return state.selection.size > 0 && state.label.trim().length > 0;
}

export type ColorScale = {
  means: Map<string, number | null>;
  lo: number;
  hi: number;
  empty: boolean;
};

/** Means per polygon for one timestamp plus the ramp range over them. */
export function colorScale(rows: ZonalRow[], timestamp: string | null): ColorScale {
  const means = new Map<string, number | null>();
  let lo = Infinity;
  let hi = -Infinity;
  for (const r of rows) {
    if (timestamp !== null && r.timestamp !== timestamp) continue;
    means.set(r.polygon_id, r.mean);
    if (r.mean !== null) {
      if (r.mean < lo) lo = r.mean;
      if (r.mean > hi) hi = r.mean;
    }
  }
  const empty = lo > hi;
  return { means, lo: empty ? 0 : lo, hi: empty ? 0 : hi, empty };
}

export function uniqueTimestamps(rows: ZonalRow[]): string[] {
  const seen = new Set<string>();
  for (const r of rows) seen.add(r.timestamp);
  return Array.from(seen).sort();
}
