/**
 * Population grid model: painting, undo history, and scenario
 * (de)serialization.  Values are raw persons/cell everywhere — the grid
 * rendered on screen is the grid sent over the wire, bit for bit.
 */

export type BrushMode = "add" | "set" | "erase";

export interface Brush {
  /** radius in grid cells; 0 paints a single cell */
  radius: number;
  /** persons/cell applied by the brush */
  value: number;
  mode: BrushMode;
}

export type Grid = number[][];

export const MAX_UNDO_LEVELS = 50;

export function makeGrid(side: number, fill = 0): Grid {
  if (!Number.isInteger(side) || side < 1) {
    throw new Error(`grid side must be a positive integer, got ${side}`);
  }
  return Array.from({ length: side }, () => Array<number>(side).fill(fill));
}

export function cloneGrid(grid: Grid): Grid {
  return grid.map((row) => row.slice());
}

export function gridsEqual(a: Grid, b: Grid): boolean {
  if (a.length !== b.length) return false;
  for (let i = 0; i < a.length; i++) {
    if (a[i].length !== b[i].length) return false;
    for (let j = 0; j < a[i].length; j++) {
      if (a[i][j] !== b[i][j]) return false;
    }
  }
  return true;
}

/**
 * Apply one brush stamp centered at (row, col).  Out-of-canvas cells are
 * no-ops; results are clamped at 0.  Returns a new grid.
 */
export function paint(grid: Grid, row: number, col: number, brush: Brush): Grid {
  if (brush.value < 0) {
    throw new Error("brush value must be >= 0");
  }
  const side = grid.length;
  const out = cloneGrid(grid);
  const r = Math.max(0, Math.floor(brush.radius));
  for (let i = row - r; i <= row + r; i++) {
    for (let j = col - r; j <= col + r; j++) {
      if (i < 0 || j < 0 || i >= side || j >= side) continue;
      if ((i - row) ** 2 + (j - col) ** 2 > r * r) continue;
      if (brush.mode === "add") {
        out[i][j] = Math.max(0, out[i][j] + brush.value);
      } else if (brush.mode === "set") {
        out[i][j] = Math.max(0, brush.value);
      } else {
        out[i][j] = 0;
      }
    }
  }
  return out;
}

/** Bounded undo stack of grid snapshots (one per stroke). */
export class History {
  private snapshots: Grid[] = [];

  constructor(private readonly limit: number = MAX_UNDO_LEVELS) {
    if (limit < 20) {
      throw new Error("history must keep at least 20 undo levels");
    }
  }

  get depth(): number {
    return this.snapshots.length;
  }

  push(grid: Grid): void {
    this.snapshots.push(cloneGrid(grid));
    if (this.snapshots.length > this.limit) {
      this.snapshots.shift();
    }
  }

  /** Pop and return the previous snapshot, or null when empty. */
  pop(): Grid | null {
    const prev = this.snapshots.pop();
    return prev === undefined ? null : prev;
  }
}

/** Exported scenario: everything needed to reproduce a what-if session. */
export interface Scenario {
  pop_orig: Grid;
  pop_edit: Grid;
  /** style vector when pinned, otherwise the seed that produced it */
  style: number[] | null;
  seed: number | null;
  checkpoint_id: string | null;
}

export function exportScenario(s: Scenario): string {
  return JSON.stringify({
    pop_orig: s.pop_orig,
    pop_edit: s.pop_edit,
    style: s.style,
    seed: s.seed,
    checkpoint_id: s.checkpoint_id,
  });
}

export function importScenario(json: string): Scenario {
  let raw: unknown;
  try {
    raw = JSON.parse(json);
  } catch {
    throw new Error("scenario file is not valid JSON");
  }
  const obj = raw as Record<string, unknown>;
  const asGrid = (v: unknown, name: string): Grid => {
    if (!Array.isArray(v) || v.length === 0) {
      throw new Error(`scenario ${name} must be a non-empty grid`);
    }
    const side = v.length;
    return v.map((row) => {
      if (!Array.isArray(row) || row.length !== side) {
        throw new Error(`scenario ${name} must be a square grid`);
      }
      return row.map((cell) => {
        if (typeof cell !== "number" || !Number.isFinite(cell) || cell < 0) {
          throw new Error(`scenario ${name} has a negative or non-numeric cell`);
        }
        return cell;
      });
    });
  };
  return {
    pop_orig: asGrid(obj.pop_orig, "pop_orig"),
    pop_edit: asGrid(obj.pop_edit, "pop_edit"),
    style: Array.isArray(obj.style) ? (obj.style as number[]) : null,
    seed: typeof obj.seed === "number" ? obj.seed : null,
    checkpoint_id:
      typeof obj.checkpoint_id === "string" ? obj.checkpoint_id : null,
  };
}
