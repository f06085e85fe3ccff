// In-memory stand-in for the HTTP service, shaped exactly like its JSON
// responses, with request recording and failure/latency injection.

import type {
  Annotation,
  FetchLike,
  PolygonFeature,
  ProductInfo,
  ZonalRow,
} from "../src/api.js";

export type RecordedRequest = {
  method: string;
  path: string;
  body?: unknown;
};

type Responder = { status: number; doc: unknown };

function respond(status: number, doc: unknown) {
  return { ok: status < 400, status, json: async () => doc };
}

export function squareFeature(
  id: string,
  lon: number,
  lat: number,
  size = 0.01,
): PolygonFeature {
  return {
    type: "Feature",
    id,
    geometry: {
      type: "Polygon",
      coordinates: [
        [
          [lon, lat],
          [lon + size, lat],
          [lon + size, lat + size],
          [lon, lat + size],
          [lon, lat],
        ],
      ],
    },
    properties: {},
  };
}

export function testProduct(): ProductInfo {
  return {
    name: "s2",
    bands: [
      { name: "B04", sample_type: "uint16", nodata: 0, scale: 1e-4, band_index_in_file: 0 },
      { name: "B08", sample_type: "uint16", nodata: 0, scale: 1e-4, band_index_in_file: 0 },
    ],
    crs: 32630,
    resolution: [10, 10],
    band_roles: { red: "B04", nir: "B08" },
  };
}

export class FakeService {
  readonly requests: RecordedRequest[] = [];
  readonly annotationsStore: Annotation[] = [];
  failAnnotate = new Set<string>();
  down = false;
  holdQueries = false;
  private held: Array<(r: Responder) => void> = [];
  private heldDocs: Responder[] = [];
  private annSeq = 0;

  constructor(
    readonly products: ProductInfo[],
    readonly features: PolygonFeature[],
    readonly timestamps: string[],
    readonly meanOf: (pid: string, ts: string, measure: string) => number | null,
  ) {}

  /** Release held /query responses in the given order (indexes into arrival order). */
  releaseHeld(order?: number[]): void {
    const idxs = order ?? this.heldDocs.map((_, i) => i);
    for (const i of idxs) {
      this.held[i]!(this.heldDocs[i]!);
    }
    this.held = [];
    this.heldDocs = [];
  }

  get heldCount(): number {
    return this.heldDocs.length;
  }

  private rows(
    polygonIds: string[],
    measure: string,
    start: string,
    end: string,
  ): ZonalRow[] {
    const out: ZonalRow[] = [];
    for (const pid of [...polygonIds].sort()) {
      for (const ts of this.timestamps) {
        if (ts < start || ts >= end) continue;
        const mean = this.meanOf(pid, ts, measure);
        out.push({
          polygon_id: pid,
          product: "s2",
          timestamp: ts,
          measure,
          count: 9,
          valid_count: mean === null ? 0 : 9,
          mean,
          std: mean === null ? null : 0.01,
          min: mean,
          max: mean,
          median: mean,
        });
      }
    }
    return out;
  }

  fetch: FetchLike = async (input, init) => {
    const method = init?.method ?? "GET";
    const url = new URL(input, "http://fake");
    const path = url.pathname;
    const body = init?.body ? JSON.parse(init.body) : undefined;
    this.requests.push({ method, path: path + url.search, body });

    if (this.down) {
      throw new TypeError("fetch failed");
    }

    if (method === "GET" && path === "/products") {
      return respond(200, this.products);
    }
    if (method === "GET" && path === "/polygons") {
      return respond(200, { type: "FeatureCollection", features: this.features });
    }
    if (method === "GET" && path === "/annotations") {
      const pid = url.searchParams.get("polygon_id");
      const items = pid
        ? this.annotationsStore.filter((a) => a.polygon_id === pid)
        : this.annotationsStore;
      return respond(200, items);
    }
    if (method === "GET" && path === "/timeseries") {
      const pid = url.searchParams.get("polygon_id")!;
      const measure = url.searchParams.get("measure")!;
      const start = url.searchParams.get("start")!;
      const end = url.searchParams.get("end")!;
      const series = this.rows([pid], measure, start, end).map((r) => ({
        timestamp: r.timestamp,
        count: r.count,
        valid_count: r.valid_count,
        mean: r.mean,
        std: r.std,
        min: r.min,
        max: r.max,
        median: r.median,
      }));
      return respond(200, {
        polygon_id: pid,
        product: "s2",
        measure,
        series,
      });
    }
    if (method === "POST" && path === "/query") {
      const doc = {
        mode: "zonal",
        fingerprint: "feedfacecafebeef",
        rows: this.rows(body.polygon_ids, body.measures[0], body.start, body.end),
      };
      if (this.holdQueries) {
        return new Promise((resolve) => {
          this.held.push((r) => resolve(respond(r.status, r.doc)));
          this.heldDocs.push({ status: 200, doc });
        });
      }
      return respond(200, doc);
    }
    if (method === "POST" && path === "/annotations") {
      if (!body.label) {
        return respond(400, { code: "invalid_request", message: "label must be non-empty" });
      }
      if (this.failAnnotate.has(body.polygon_id)) {
        return respond(404, {
          code: "unknown_polygon",
          message: `no polygon named '${body.polygon_id}'`,
        });
      }
      this.annSeq += 1;
      const rec: Annotation = {
        id: `ann_${String(this.annSeq).padStart(6, "0")}`,
        polygon_id: body.polygon_id,
        label: body.label,
        author: body.author ?? "",
        created_at: "2026-01-01T00:00:00Z",
      };
      this.annotationsStore.push(rec);
      return respond(201, rec);
    }
    return respond(404, { code: "not_found", message: `no route ${method} ${path}` });
  };
}
