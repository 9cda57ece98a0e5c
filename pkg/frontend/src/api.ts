/**
 * Typed client for the tile service JSON API.  The fetch implementation is
 * injected so tests can run against a stub; grids travel raw (persons/cell)
 * and are serialized exactly as held in memory.
 */

import type { Grid } from "./grid";

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown> }>;

export interface ServiceErrorBody {
  code: string;
  message: string;
  field?: string;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly body: ServiceErrorBody,
  ) {
    super(body.message);
  }
}

export interface ModelInfo {
  checkpoint_id: string;
  resolution: number;
  pop_log_min: number;
  pop_log_max: number;
}

export interface GenerateResponse {
  png: string;
  style: number[];
  checkpoint_id: string;
  timing_ms: number;
}

export interface RepopulateResponse {
  png: string;
  pixel_delta_png: string;
  checkpoint_id: string;
  timing_ms: number;
}

export interface EffectMapResponse {
  heatmap_png: string;
  stats: { mean_inside: number; mean_outside: number };
  checkpoint_id: string;
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike,
  ) {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const resp = await this.fetchImpl(this.baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    const payload = await resp.json();
    if (!resp.ok) {
      throw new ApiError(resp.status, payload as ServiceErrorBody);
    }
    return payload as T;
  }

  async modelInfo(): Promise<ModelInfo> {
    const resp = await this.fetchImpl(this.baseUrl + "/api/model");
    const payload = await resp.json();
    if (!resp.ok) {
      throw new ApiError(resp.status, payload as ServiceErrorBody);
    }
    return payload as ModelInfo;
  }

  generate(pop: Grid, opts: { seed?: number; style?: number[] }): Promise<GenerateResponse> {
    return this.post("/api/generate", { pop, ...opts });
  }

  reconstruct(imagePng: string, pop: Grid): Promise<GenerateResponse> {
    return this.post("/api/reconstruct", { image: imagePng, pop });
  }

  repopulate(imagePng: string, popOrig: Grid, popNew: Grid): Promise<RepopulateResponse> {
    return this.post("/api/repopulate", {
      image: imagePng,
      pop_orig: popOrig,
      pop_new: popNew,
    });
  }

  effectMap(popA: Grid, popB: Grid, kStyles = 20): Promise<EffectMapResponse> {
    return this.post("/api/effect-map", {
      pop_a: popA,
      pop_b: popB,
      k_styles: kStyles,
    });
  }

  interpolate(
    styleA: number[],
    styleB: number[],
    t: number,
    pop: Grid,
  ): Promise<GenerateResponse> {
    return this.post("/api/interpolate", {
      style_a: styleA,
      style_b: styleB,
      t,
      pop,
    });
  }
}
