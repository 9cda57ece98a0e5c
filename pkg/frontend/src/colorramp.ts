/**
 * Log-scale color ramp for population display.  Human-readable across the
 * 10–5000 persons/cell range; zero renders as near-black.
 */

export interface Rgb {
  r: number;
  g: number;
  b: number;
}

export const RAMP_MIN = 10;
export const RAMP_MAX = 5000;

/** Normalized position of `value` on the log ramp, clamped to [0, 1]. */
export function rampPosition(value: number, min = RAMP_MIN, max = RAMP_MAX): number {
  if (value <= 0) return 0;
  const lo = Math.log(min);
  const hi = Math.log(max);
  const t = (Math.log(Math.max(value, min)) - lo) / (hi - lo);
  return Math.min(1, Math.max(0, t));
}

/** Dark blue → yellow → white, perceptually ordered for density maps. */
export function rampColor(value: number, min = RAMP_MIN, max = RAMP_MAX): Rgb {
  const t = rampPosition(value, min, max);
  if (value <= 0) return { r: 16, g: 16, b: 24 };
  const stop = (a: number, b: number, u: number) => Math.round(a + (b - a) * u);
  if (t < 0.5) {
    const u = t / 0.5;
    return { r: stop(30, 240, u), g: stop(60, 200, u), b: stop(140, 60, u) };
  }
  const u = (t - 0.5) / 0.5;
  return { r: stop(240, 255, u), g: stop(200, 255, u), b: stop(60, 235, u) };
}

export function rampCss(value: number): string {
  const { r, g, b } = rampColor(value);
  return `rgb(${r}, ${g}, ${b})`;
}

/** Tick values for the ramp legend, one per decade plus the extremes. */
export function legendTicks(min = RAMP_MIN, max = RAMP_MAX): number[] {
  const ticks: number[] = [min];
  for (let v = 100; v < max; v *= 10) ticks.push(v);
  ticks.push(max);
  return ticks;
}
