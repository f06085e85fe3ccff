// Color ramp shared with the server-side SVG renderer. The two must agree
// byte for byte: the server rounds half-up, which is Math.round here.

const LOW = [68, 1, 84] as const;
const HIGH = [253, 231, 37] as const;

export function rampColor(t: number): string {
  if (Number.isNaN(t)) t = 0;
  t = Math.min(1, Math.max(0, t));
  let out = "#";
  for (let i = 0; i < 3; i++) {
    const v = Math.round(LOW[i]! + (HIGH[i]! - LOW[i]!) * t);
    out += v.toString(16).padStart(2, "0");
  }
  return out;
}

/** Ramp position for a value over [lo, hi]; a degenerate range pins t=0.5. */
export function rampT(value: number, lo: number, hi: number): number {
  const span = hi - lo;
  return span === 0 ? 0.5 : (value - lo) / span;
}

export function fillFor(value: number, lo: number, hi: number): string {
  return rampColor(rampT(value, lo, hi));
}
