import { Api, PolygonFeature, ZonalRow } from "./api.js";
import {
  Bounds,
  Projection,
  boxesIntersect,
  dataBounds,
  featurePath,
  fitProjection,
  screenBBox,
} from "./geometry.js";
import { fillFor } from "./ramp.js";
import { SequenceGate } from "./seq.js";
import {
  ViewState,
  canSubmit,
  colorScale,
  extendSelection,
  initialState,
  measureChoices,
  selectedTimestamp,
  toggleSelection,
  uniqueTimestamps,
  withTimestamps,
} from "./state.js";

const SVG_NS = "http://www.w3.org/2000/svg";
const NEUTRAL_FILL = "#d7d7d7";
const DRAG_THRESHOLD = 3;

export type AppOptions = {
  viewWidth?: number;
  start?: string;
  end?: string;
  backdrop?: string | null;
  author?: string;
};

export type App = {
  boot(): Promise<void>;
  /** Resolves once every spawned async operation has finished. */
  settle(): Promise<void>;
  state(): ViewState;
};

export function createApp(root: HTMLElement, api: Api, opts: AppOptions = {}): App {
  const viewWidth = opts.viewWidth ?? 800;
  const start = opts.start ?? "1970-01-01T00:00:00Z";
  const end = opts.end ?? "2100-01-01T00:00:00Z";

  let state = initialState();
  let features: PolygonFeature[] = [];
  let projection: Projection | null = null;
  let fullRows: ZonalRow[] = [];
  let annotatedCounts = new Map<string, number>();
  let badges = new Map<string, string>();

  const queryGate = new SequenceGate();
  const seriesGate = new SequenceGate();
  const pending = new Set<Promise<unknown>>();

  root.innerHTML = `
    <div class="mc-banner" hidden>
      <span class="mc-banner-msg"></span>
      <button class="mc-retry" type="button">Retry</button>
    </div>
    <div class="mc-toolbar">
      <label>product <select class="mc-product"></select></label>
      <label>measure <select class="mc-measure"></select></label>
      <label class="mc-dates">date
        <input class="mc-date" type="range" min="0" max="0" step="1" disabled>
        <span class="mc-date-label">no data</span>
      </label>
      <span class="mc-legend" hidden>
        <span class="mc-legend-lo"></span>
        <span class="mc-legend-bar"></span>
        <span class="mc-legend-hi"></span>
      </span>
    </div>
    <div class="mc-body">
      <svg class="mc-map" xmlns="${SVG_NS}"></svg>
      <aside class="mc-panel" hidden>
        <header class="mc-panel-head"></header>
        <svg class="mc-chart" xmlns="${SVG_NS}"></svg>
        <table class="mc-series"><tbody></tbody></table>
      </aside>
    </div>
    <div class="mc-annotate">
      <span class="mc-selcount">0 selected</span>
      <input class="mc-label" type="text" placeholder="label">
      <button class="mc-apply" type="button" disabled>Annotate</button>
      <span class="mc-annstatus"></span>
    </div>`;

  const $ = <T extends Element>(sel: string) => root.querySelector(sel) as T;
  const banner = $<HTMLDivElement>(".mc-banner");
  const bannerMsg = $<HTMLSpanElement>(".mc-banner-msg");
  const productSel = $<HTMLSelectElement>(".mc-product");
  const measureSel = $<HTMLSelectElement>(".mc-measure");
  const dateInput = $<HTMLInputElement>(".mc-date");
  const dateLabel = $<HTMLSpanElement>(".mc-date-label");
  const legend = $<HTMLSpanElement>(".mc-legend");
  const map = $<SVGSVGElement>(".mc-map");
  const panel = $<HTMLElement>(".mc-panel");
  const labelInput = $<HTMLInputElement>(".mc-label");
  const applyBtn = $<HTMLButtonElement>(".mc-apply");

  function track<T>(p: Promise<T>): Promise<T> {
    pending.add(p);
    p.finally(() => pending.delete(p)).catch(() => undefined);
    return p;
  }

  function showBanner(message: string) {
    bannerMsg.textContent = message;
    banner.hidden = false;
  }

  function plusOneSecond(ts: string): string {
    const iso = new Date(Date.parse(ts) + 1000).toISOString();
    return iso.replace(/\.\d{3}Z$/, "Z");
  }

  // ---- map ----------------------------------------------------------------

  function buildMap() {
    while (map.firstChild) map.removeChild(map.firstChild);
    const bounds = dataBounds(features);
    projection = fitProjection(bounds, viewWidth);
    map.setAttribute("width", String(projection.width));
    map.setAttribute("height", String(Math.round(projection.height)));
    map.setAttribute("viewBox", `0 0 ${projection.width} ${Math.round(projection.height)}`);

    if (opts.backdrop) {
      const img = document.createElementNS(SVG_NS, "image");
      img.setAttribute("href", opts.backdrop);
      img.setAttribute("x", "0");
      img.setAttribute("y", "0");
      img.setAttribute("width", String(projection.width));
      img.setAttribute("height", String(Math.round(projection.height)));
      img.setAttribute("preserveAspectRatio", "none");
      map.appendChild(img);
    }

    const layer = document.createElementNS(SVG_NS, "g");
    layer.setAttribute("class", "mc-polygons");
    for (const f of features) {
      const path = document.createElementNS(SVG_NS, "path");
      path.setAttribute("d", featurePath(f, projection));
      path.setAttribute("fill-rule", "evenodd");
      path.setAttribute("fill", NEUTRAL_FILL);
      path.setAttribute("data-pid", f.id);
      layer.appendChild(path);
    }
    map.appendChild(layer);

    const rubber = document.createElementNS(SVG_NS, "rect");
    rubber.setAttribute("class", "mc-rubber");
    rubber.setAttribute("visibility", "hidden");
    map.appendChild(rubber);
  }

  function recolor(rows: ZonalRow[], timestamp: string | null) {
    const scale = colorScale(rows, timestamp);
    for (const path of map.querySelectorAll<SVGPathElement>("path[data-pid]")) {
      const pid = path.getAttribute("data-pid")!;
      const mean = scale.means.get(pid);
      path.setAttribute(
        "fill",
        mean === null || mean === undefined ? NEUTRAL_FILL : fillFor(mean, scale.lo, scale.hi),
      );
    }
    legend.hidden = scale.empty;
    if (!scale.empty) {
      $<HTMLSpanElement>(".mc-legend-lo").textContent = String(scale.lo);
      $<HTMLSpanElement>(".mc-legend-hi").textContent = String(scale.hi);
    }
  }

  function refreshMarks() {
    for (const path of map.querySelectorAll<SVGPathElement>("path[data-pid]")) {
      const pid = path.getAttribute("data-pid")!;
      path.classList.toggle("selected", state.selection.has(pid));
      path.classList.toggle("annotated", (annotatedCounts.get(pid) ?? 0) > 0);
      const err = badges.get(pid);
      path.classList.toggle("failed", err !== undefined);
      if (err !== undefined) path.setAttribute("data-error", err);
      else path.removeAttribute("data-error");
    }
    $<HTMLSpanElement>(".mc-selcount").textContent = `${state.selection.size} selected`;
    applyBtn.disabled = !canSubmit(state);
  }

  // ---- queries ------------------------------------------------------------

  async function runFullQuery(): Promise<void> {
    if (!state.product || !state.measure || features.length === 0) return;
    const { ticket, signal } = queryGate.issue();
    const res = await api.query(
      {
        polygon_ids: features.map((f) => f.id),
        products: [state.product],
        measures: [state.measure],
        start,
        end,
      },
      signal,
    );
    if (!queryGate.isCurrent(ticket)) return;
    fullRows = res.rows;
    state = withTimestamps(state, uniqueTimestamps(res.rows));
    syncDateControl();
    recolor(fullRows, selectedTimestamp(state));
  }

  async function runSnapshotQuery(ts: string): Promise<void> {
    const { ticket, signal } = queryGate.issue();
    const res = await api.query(
      {
        polygon_ids: features.map((f) => f.id),
        products: [state.product],
        measures: [state.measure],
        start: ts,
        end: plusOneSecond(ts),
      },
      signal,
    );
    if (!queryGate.isCurrent(ticket)) return;
    recolor(res.rows, ts);
  }

  function syncDateControl() {
    const n = state.timestamps.length;
    dateInput.disabled = n === 0;
    dateInput.max = String(Math.max(0, n - 1));
    dateInput.value = String(Math.max(0, state.tsIndex));
    dateLabel.textContent = selectedTimestamp(state) ?? "no data";
  }

  // ---- series panel -------------------------------------------------------

  async function openSeries(pid: string): Promise<void> {
    const { ticket, signal } = seriesGate.issue();
    const res = await api.timeseries(pid, state.product, state.measure, start, end, signal);
    if (!seriesGate.isCurrent(ticket)) return;

    panel.hidden = false;
    $<HTMLElement>(".mc-panel-head").textContent =
      `${res.polygon_id} · ${res.product} · ${res.measure}`;

    const tbody = $<HTMLTableSectionElement>(".mc-series tbody");
    tbody.textContent = "";
    for (const pt of res.series) {
      const tr = document.createElement("tr");
      const tdTs = document.createElement("td");
      tdTs.textContent = pt.timestamp;
      const tdMean = document.createElement("td");
      tdMean.className = "mc-mean";
      tdMean.textContent = pt.mean === null ? "" : String(pt.mean);
      const tdValid = document.createElement("td");
      tdValid.textContent = `${pt.valid_count}/${pt.count}`;
      tr.append(tdTs, tdMean, tdValid);
      tbody.appendChild(tr);
    }
    drawSeriesChart(res.series.map((pt) => pt.mean));
  }

  function drawSeriesChart(means: Array<number | null>) {
    const chart = $<SVGSVGElement>(".mc-chart");
    while (chart.firstChild) chart.removeChild(chart.firstChild);
    const w = 280;
    const h = 120;
    chart.setAttribute("width", String(w));
    chart.setAttribute("height", String(h));
    chart.setAttribute("viewBox", `0 0 ${w} ${h}`);
    const vals = means.filter((m): m is number => m !== null);
    if (vals.length === 0) return;
    let lo = Math.min(...vals);
    let hi = Math.max(...vals);
    if (lo === hi) {
      lo -= 0.5;
      hi += 0.5;
    }
    const stepX = means.length > 1 ? w / (means.length - 1) : 0;
    const pts: string[] = [];
    means.forEach((m, i) => {
      if (m === null) return;
      const x = means.length > 1 ? i * stepX : w / 2;
      const y = h - ((m - lo) / (hi - lo)) * (h - 8) - 4;
      pts.push(`${Math.round(x * 100) / 100},${Math.round(y * 100) / 100}`);
    });
    const line = document.createElementNS(SVG_NS, "polyline");
    line.setAttribute("points", pts.join(" "));
    line.setAttribute("fill", "none");
    line.setAttribute("class", "mc-chart-line");
    chart.appendChild(line);
  }

  // ---- selection ----------------------------------------------------------

  let dragOrigin: [number, number] | null = null;
  let dragMoved = false;

  function toLocal(evt: MouseEvent): [number, number] {
    const rect = map.getBoundingClientRect();
    if (rect.width > 0 && rect.height > 0) {
      const sx = viewWidth / rect.width;
      const sy = Number(map.getAttribute("height")) / rect.height;
      return [(evt.clientX - rect.left) * sx, (evt.clientY - rect.top) * sy];
    }
    return [evt.clientX, evt.clientY];
  }

  function rubberRect(): SVGRectElement {
    return map.querySelector(".mc-rubber") as SVGRectElement;
  }

  map.addEventListener("mousedown", (evt) => {
    dragOrigin = toLocal(evt as MouseEvent);
    dragMoved = false;
  });

  map.addEventListener("mousemove", (evt) => {
    if (!dragOrigin) return;
    const [x, y] = toLocal(evt as MouseEvent);
    if (
      Math.abs(x - dragOrigin[0]) > DRAG_THRESHOLD ||
      Math.abs(y - dragOrigin[1]) > DRAG_THRESHOLD
    ) {
      dragMoved = true;
    }
    const r = rubberRect();
    r.setAttribute("x", String(Math.min(x, dragOrigin[0])));
    r.setAttribute("y", String(Math.min(y, dragOrigin[1])));
    r.setAttribute("width", String(Math.abs(x - dragOrigin[0])));
    r.setAttribute("height", String(Math.abs(y - dragOrigin[1])));
    r.setAttribute("visibility", dragMoved ? "visible" : "hidden");
  });

  map.addEventListener("mouseup", (evt) => {
    const origin = dragOrigin;
    dragOrigin = null;
    rubberRect().setAttribute("visibility", "hidden");
    if (!origin || !projection) return;
    const [x, y] = toLocal(evt as MouseEvent);

    if (dragMoved) {
      const box: Bounds = {
        minX: Math.min(x, origin[0]),
        minY: Math.min(y, origin[1]),
        maxX: Math.max(x, origin[0]),
        maxY: Math.max(y, origin[1]),
      };
      const hit = features
        .filter((f) => boxesIntersect(screenBBox(f, projection!), box))
        .map((f) => f.id);
      state = extendSelection(state, hit);
      refreshMarks();
      return;
    }

    const target = evt.target as Element;
    const pid = target.getAttribute?.("data-pid");
    if (pid) {
      state = toggleSelection(state, pid);
      refreshMarks();
      track(openSeries(pid));
    }
  });

  // ---- annotation ---------------------------------------------------------

  async function submitAnnotations(): Promise<void> {
    const label = state.label.trim();
    const pids = Array.from(state.selection).sort();
    const status = $<HTMLSpanElement>(".mc-annstatus");
    status.textContent = "saving…";
    badges = new Map();
    let ok = 0;
    for (const pid of pids) {
      try {
        await api.annotate(pid, label, opts.author ?? "");
        ok += 1;
        state.selection.delete(pid);
      } catch (e) {
        badges.set(pid, e instanceof Error ? e.message : String(e));
      }
    }
    try {
      const all = await api.annotations();
      annotatedCounts = new Map();
      for (const a of all) {
        annotatedCounts.set(a.polygon_id, (annotatedCounts.get(a.polygon_id) ?? 0) + 1);
      }
    } catch {
      // marks refresh on the next boot if the listing failed
    }
    status.textContent = badges.size
      ? `${ok}/${pids.length} annotated, ${badges.size} failed`
      : `${ok}/${pids.length} annotated`;
    refreshMarks();
  }

  // ---- controls -----------------------------------------------------------

  productSel.addEventListener("change", () => {
    state = { ...state, product: productSel.value };
    track(populateMeasures().then(runFullQuery));
  });

  measureSel.addEventListener("change", () => {
    state = { ...state, measure: measureSel.value };
    track(runFullQuery());
  });

  dateInput.addEventListener("input", () => {
    const idx = Number(dateInput.value);
    if (idx < 0 || idx >= state.timestamps.length) return;
    state = { ...state, tsIndex: idx };
    dateLabel.textContent = selectedTimestamp(state) ?? "no data";
    track(runSnapshotQuery(state.timestamps[idx]!));
  });

  labelInput.addEventListener("input", () => {
    state = { ...state, label: labelInput.value };
    applyBtn.disabled = !canSubmit(state);
  });

  applyBtn.addEventListener("click", () => {
    if (canSubmit(state)) track(submitAnnotations());
  });

  $<HTMLButtonElement>(".mc-retry").addEventListener("click", () => {
    track(boot());
  });

  async function populateMeasures(): Promise<void> {
    const products = await api.products();
    const current = products.find((p) => p.name === state.product) ?? products[0];
    if (!current) throw new Error("service has no products");
    productSel.textContent = "";
    for (const p of products) {
      const o = document.createElement("option");
      o.value = p.name;
      o.textContent = p.name;
      o.selected = p.name === current.name;
      productSel.appendChild(o);
    }
    const choices = measureChoices(current);
    measureSel.textContent = "";
    for (const m of choices) {
      const o = document.createElement("option");
      o.value = m;
      o.textContent = m;
      measureSel.appendChild(o);
    }
    const measure = choices.includes(state.measure) ? state.measure : (choices[0] ?? "");
    state = { ...state, product: current.name, measure };
    measureSel.value = measure;
  }

  // ---- boot ---------------------------------------------------------------

  async function boot(): Promise<void> {
    banner.hidden = true;
    try {
      await populateMeasures();
      const collection = await api.polygons();
      features = collection.features;
      buildMap();

      annotatedCounts = new Map();
      for (const a of await api.annotations()) {
        annotatedCounts.set(a.polygon_id, (annotatedCounts.get(a.polygon_id) ?? 0) + 1);
      }

      await runFullQuery();
      refreshMarks();
    } catch (e) {
      showBanner(e instanceof Error ? e.message : String(e));
    }
  }

  async function settle(): Promise<void> {
    while (pending.size > 0) {
      await Promise.allSettled(Array.from(pending));
    }
  }

  return {
    boot: () => track(boot()),
    settle,
    state: () => state,
  };
}
