/**
 * DOM wiring: three-pane comparison (reference | population | generated),
 * brush controls, delta toggle, style controls and scenario import/export.
 * All logic lives in the store; this file only renders and forwards events.
 */

import { ApiClient } from "./api";
import { legendTicks, rampCss } from "./colorramp";
import type { BrushMode } from "./grid";
import { ScenarioStore } from "./state";

const GRID_SIDE = 16;
const CELL_PX = 22;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function renderGrid(store: ScenarioStore, canvas: HTMLCanvasElement): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const side = store.popEdit.length;
  canvas.width = side * CELL_PX;
  canvas.height = side * CELL_PX;
  for (let i = 0; i < side; i++) {
    for (let j = 0; j < side; j++) {
      ctx.fillStyle = rampCss(store.popEdit[i][j]);
      ctx.fillRect(j * CELL_PX, i * CELL_PX, CELL_PX - 1, CELL_PX - 1);
    }
  }
}

function renderPanes(store: ScenarioStore): void {
  const ref = el<HTMLImageElement>("pane-reference");
  const gen = el<HTMLImageElement>("pane-generated");
  const delta = el<HTMLImageElement>("pane-delta");
  const banner = el<HTMLDivElement>("error-banner");
  ref.src = store.panes.referencePng
    ? `data:image/png;base64,${store.panes.referencePng}`
    : "";
  gen.src = store.panes.generatedPng
    ? `data:image/png;base64,${store.panes.generatedPng}`
    : "";
  delta.src = store.panes.deltaPng
    ? `data:image/png;base64,${store.panes.deltaPng}`
    : "";
  delta.style.display = store.showDelta ? "block" : "none";
  banner.textContent = store.errorBanner ?? "";
  banner.style.display = store.errorBanner ? "block" : "none";
  el<HTMLSpanElement>("checkpoint-id").textContent =
    store.checkpointId ?? "(none)";
}

function renderLegend(container: HTMLElement): void {
  container.innerHTML = "";
  for (const tick of legendTicks()) {
    const chip = document.createElement("span");
    chip.className = "legend-chip";
    chip.style.background = rampCss(tick);
    chip.textContent = ` ${tick} `;
    chip.title = `${tick} persons/cell`;
    container.appendChild(chip);
  }
}

export function boot(): void {
  const api = new ApiClient("", (url, init) => fetch(url, init));
  const store = new ScenarioStore(api, GRID_SIDE);
  const canvas = el<HTMLCanvasElement>("pop-canvas");

  const refresh = () => {
    renderGrid(store, canvas);
    renderPanes(store);
  };

  canvas.addEventListener("click", (ev) => {
    const rect = canvas.getBoundingClientRect();
    const col = Math.floor((ev.clientX - rect.left) / CELL_PX);
    const row = Math.floor((ev.clientY - rect.top) / CELL_PX);
    store.stroke(row, col);
    refresh();
  });

  el<HTMLSelectElement>("brush-mode").addEventListener("change", (ev) => {
    store.brush.mode = (ev.target as HTMLSelectElement).value as BrushMode;
  });
  el<HTMLInputElement>("brush-value").addEventListener("change", (ev) => {
    store.brush.value = Math.max(0, Number((ev.target as HTMLInputElement).value));
  });
  el<HTMLInputElement>("brush-radius").addEventListener("change", (ev) => {
    store.brush.radius = Math.max(0, Number((ev.target as HTMLInputElement).value));
  });

  el<HTMLButtonElement>("btn-undo").addEventListener("click", () => {
    store.undo();
    refresh();
  });
  el<HTMLButtonElement>("btn-regenerate").addEventListener("click", () => {
    void store.regenerate().then(refresh);
  });
  el<HTMLButtonElement>("btn-resample").addEventListener("click", () => {
    void store.resampleStyle().then(refresh);
  });
  el<HTMLInputElement>("delta-toggle").addEventListener("change", (ev) => {
    store.showDelta = (ev.target as HTMLInputElement).checked;
    refresh();
  });
  el<HTMLButtonElement>("btn-pin-a").addEventListener("click", () => store.pinA());
  el<HTMLButtonElement>("btn-pin-b").addEventListener("click", () => store.pinB());
  el<HTMLInputElement>("interp-t").addEventListener("change", (ev) => {
    const t = Number((ev.target as HTMLInputElement).value);
    void store.interpolateTo(t).then(refresh);
  });

  el<HTMLButtonElement>("btn-export").addEventListener("click", () => {
    const blob = new Blob([store.exportJson()], { type: "application/json" });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = "scenario.json";
    a.click();
    URL.revokeObjectURL(a.href);
  });
  el<HTMLInputElement>("file-import").addEventListener("change", (ev) => {
    const file = (ev.target as HTMLInputElement).files?.[0];
    if (!file) return;
    void file.text().then((text) => {
      store.importJson(text);
      refresh();
    });
  });

  renderLegend(el<HTMLDivElement>("pop-legend"));
  refresh();
}

if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", boot);
}
