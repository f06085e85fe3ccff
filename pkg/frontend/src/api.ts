// Thin typed client for the service API. fetch is injected so tests can
// intercept or redirect every request.

export type BandInfo = {
  name: string;
  sample_type: string;
  nodata: number | null;
  scale: number;
  band_index_in_file: number;
};

export type ProductInfo = {
  name: string;
  bands: BandInfo[];
  crs: number;
  resolution: [number, number];
  band_roles: Record<string, string>;
};

export type PolygonFeature = {
  type: "Feature";
  id: string;
  geometry: { type: "Polygon"; coordinates: number[][][] };
  properties: Record<string, string>;
};

export type FeatureCollection = {
  type: "FeatureCollection";
  features: PolygonFeature[];
};

export type ZonalRow = {
  polygon_id: string;
  product: string;
  timestamp: string;
  measure: string;
  count: number;
  valid_count: number;
  mean: number | null;
  std: number | null;
  min: number | null;
  max: number | null;
  median: number | null;
};

export type QueryResult = {
  mode: "zonal";
  fingerprint: string;
  rows: ZonalRow[];
};

export type QueryBody = {
  polygon_ids: string[];
  products: string[];
  measures: string[];
  start: string;
  end: string;
};

export type SeriesPoint = {
  timestamp: string;
  count: number;
  valid_count: number;
  mean: number | null;
  std: number | null;
  min: number | null;
  max: number | null;
  median: number | null;
};

export type Timeseries = {
  polygon_id: string;
  product: string;
  measure: string;
  series: SeriesPoint[];
};

export type Annotation = {
  id: string;
  polygon_id: string;
  label: string;
  author: string;
  created_at: string;
  note?: string;
};

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export type FetchLike = (
  input: string,
  init?: {
    method?: string;
    headers?: Record<string, string>;
    body?: string;
    signal?: AbortSignal;
  },
) => Promise<{
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}>;

export class Api {
  constructor(
    private readonly base: string,
    private readonly fetchFn: FetchLike,
  ) {}

  private async call<T>(
    method: string,
    path: string,
    body?: unknown,
    signal?: AbortSignal,
  ): Promise<T> {
    const init: Parameters<FetchLike>[1] = { method, signal };
    if (body !== undefined) {
      init.headers = { "Content-Type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const res = await this.fetchFn(this.base + path, init);
    const doc = (await res.json()) as Record<string, unknown>;
    if (!res.ok) {
      throw new ApiError(
        res.status,
        String(doc.code ?? "error"),
        String(doc.message ?? `request failed (${res.status})`),
      );
    }
    return doc as T;
  }

  healthz(): Promise<{ status: string }> {
    return this.call("GET", "/healthz");
  }

  async products(): Promise<ProductInfo[]> {
    // list endpoint returns a bare array
    return (await this.call<unknown>("GET", "/products")) as ProductInfo[];
  }

  polygons(): Promise<FeatureCollection> {
    return this.call("GET", "/polygons");
  }

  query(body: QueryBody, signal?: AbortSignal): Promise<QueryResult> {
    return this.call("POST", "/query", body, signal);
  }

  timeseries(
    polygonId: string,
    product: string,
    measure: string,
    start: string,
    end: string,
    signal?: AbortSignal,
  ): Promise<Timeseries> {
    const q = new URLSearchParams({
      polygon_id: polygonId,
      product,
      measure,
      start,
      end,
    });
    return this.call("GET", `/timeseries?${q}`, undefined, signal);
  }

  annotate(
    polygonId: string,
    label: string,
    author = "",
    note?: string,
  ): Promise<Annotation> {
    const body: Record<string, string> = { polygon_id: polygonId, label, author };
    if (note !== undefined) body.note = note;
    return this.call("POST", "/annotations", body);
  }

  async annotations(polygonId?: string): Promise<Annotation[]> {
    const path = polygonId
      ? `/annotations?polygon_id=${encodeURIComponent(polygonId)}`
      : "/annotations";
    return (await this.call<unknown>("GET", path)) as Annotation[];
  }
}
