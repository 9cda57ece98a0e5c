/**
 * Scenario store: the editing loop's state machine, independent of the DOM.
 * One service request is in flight at a time; failures surface as a banner
 * without touching the grids or panes.
 */

import { ApiClient, ApiError } from "./api";
import {
  Brush,
  Grid,
  History,
  Scenario,
  cloneGrid,
  exportScenario,
  gridsEqual,
  importScenario,
  paint,
} from "./grid";

export interface Panes {
  /** reference image (reconstruction source), if any */
  referencePng: string | null;
  /** latest generated/repopulated image */
  generatedPng: string | null;
  /** per-pixel |delta| heatmap from the last repopulate */
  deltaPng: string | null;
}

export class ScenarioStore {
  popOrig: Grid;
  popEdit: Grid;
  brush: Brush = { radius: 1, value: 100, mode: "set" };
  panes: Panes = { referencePng: null, generatedPng: null, deltaPng: null };
  /** style pinned to the current generated image */
  style: number[] | null = null;
  seed: number | null = null;
  checkpointId: string | null = null;
  errorBanner: string | null = null;
  showDelta = false;
  pinnedA: { style: number[]; png: string } | null = null;
  pinnedB: { style: number[]; png: string } | null = null;

  private history = new History();
  private inFlight = false;

  constructor(
    private readonly api: ApiClient,
    side: number,
  ) {
    this.popOrig = Array.from({ length: side }, () => Array(side).fill(0));
    this.popEdit = cloneGrid(this.popOrig);
  }

  get busy(): boolean {
    return this.inFlight;
  }

  get undoDepth(): number {
    return this.history.depth;
  }

  /** One brush stroke: snapshots the grid for undo, then applies the stamp. */
  stroke(row: number, col: number): void {
    this.history.push(this.popEdit);
    this.popEdit = paint(this.popEdit, row, col, this.brush);
  }

  undo(): boolean {
    const prev = this.history.pop();
    if (prev === null) return false;
    this.popEdit = prev;
    return true;
  }

  get edited(): boolean {
    return !gridsEqual(this.popOrig, this.popEdit);
  }

  /** Serialize the exact grids held in memory (raw persons/cell). */
  exportJson(): string {
    return exportScenario({
      pop_orig: this.popOrig,
      pop_edit: this.popEdit,
      style: this.style,
      seed: this.seed,
      checkpoint_id: this.checkpointId,
    });
  }

  importJson(json: string): void {
    const s: Scenario = importScenario(json);
    this.popOrig = s.pop_orig;
    this.popEdit = s.pop_edit;
    this.style = s.style;
    this.seed = s.seed;
    this.checkpointId = s.checkpoint_id;
    this.history = new History();
  }

  private async guarded<T>(call: () => Promise<T>): Promise<T | null> {
    if (this.inFlight) return null;
    this.inFlight = true;
    this.errorBanner = null;
    try {
      return await call();
    } catch (err) {
      // state (grids, panes, pins) is deliberately left untouched
      if (err instanceof ApiError) {
        const field = err.body.field ? ` (${err.body.field})` : "";
        this.errorBanner = `${err.body.code}${field}: ${err.body.message}`;
      } else {
        this.errorBanner = `service unreachable: ${String(err)}`;
      }
      return null;
    } finally {
      this.inFlight = false;
    }
  }

  /**
   * Regenerate: repopulate when a reference image exists, otherwise a plain
   * generation under the edited grid.  The grid sent is the grid on screen.
   */
  async regenerate(): Promise<void> {
    await this.guarded(async () => {
      if (this.panes.referencePng !== null) {
        const r = await this.api.repopulate(
          this.panes.referencePng,
          this.popOrig,
          this.popEdit,
        );
        this.panes.generatedPng = r.png;
        this.panes.deltaPng = r.pixel_delta_png;
        this.checkpointId = r.checkpoint_id;
      } else {
        const r = await this.api.generate(this.popEdit, {
          ...(this.style !== null
            ? { style: this.style }
            : { seed: this.seed ?? 0 }),
        });
        this.panes.generatedPng = r.png;
        this.panes.deltaPng = null;
        this.style = r.style;
        this.checkpointId = r.checkpoint_id;
      }
    });
  }

  /** Draw a fresh style under the same edited grid. */
  async resampleStyle(): Promise<void> {
    await this.guarded(async () => {
      const seed = Math.floor(Math.random() * 2 ** 31);
      const r = await this.api.generate(this.popEdit, { seed });
      this.seed = seed;
      this.style = r.style;
      this.panes.generatedPng = r.png;
      this.checkpointId = r.checkpoint_id;
    });
  }

  pinA(): void {
    if (this.style && this.panes.generatedPng) {
      this.pinnedA = { style: this.style, png: this.panes.generatedPng };
    }
  }

  pinB(): void {
    if (this.style && this.panes.generatedPng) {
      this.pinnedB = { style: this.style, png: this.panes.generatedPng };
    }
  }

  /** Interpolate between the pinned styles at t in [0, 1] and regenerate. */
  async interpolateTo(t: number): Promise<void> {
    const a = this.pinnedA;
    const b = this.pinnedB;
    if (!a || !b) {
      this.errorBanner = "pin two styles before interpolating";
      return;
    }
    await this.guarded(async () => {
      const r = await this.api.interpolate(a.style, b.style, t, this.popEdit);
      this.panes.generatedPng = r.png;
      this.style = r.style;
      this.checkpointId = r.checkpoint_id;
    });
  }

  /** Load a reference image plus its population grid for the editing loop. */
  setReference(png: string, pop: Grid): void {
    this.panes.referencePng = png;
    this.popOrig = cloneGrid(pop);
    this.popEdit = cloneGrid(pop);
    this.panes.deltaPng = null;
    this.history = new History();
  }
}
