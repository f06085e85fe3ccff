// @vitest-environment jsdom
// End-to-end against the real service: seed a catalog with two scenes and
// 1000 field polygons, start the server on an ephemeral port, and drive the
// UI in jsdom with real HTTP. Needs the Python package installed
// (pip install -e .. from this directory).

import { spawn, execFileSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { Api, type FetchLike } from "../src/api.js";
import { createApp, type App } from "../src/app.js";
import { fillFor } from "../src/ramp.js";

const REPO = resolve(process.cwd(), "..");
const NEUTRAL = "#d7d7d7";

const SEED = `
import json, sys
import numpy as np
sys.path.insert(0, ${JSON.stringify(join(REPO, "tests"))})
from geotiff_writer import write_geotiff
from minicube.catalog import BandDef, CatalogStore, ProductDefinition
from minicube.geo import CrsId

work = sys.argv[1]
rng = np.random.default_rng(99)
for scene, ts in [("S0001", "20200611T105031"), ("S0002", "20200621T105029")]:
    for band in ("B04", "B08"):
        a = rng.integers(1, 10000, size=(512, 512)).astype(np.uint16)
        a[rng.random((512, 512)) < 0.02] = 0
        blob = write_geotiff(a, 500000.0, 4800000.0, 10.0, 10.0,
                             epsg=32630, nodata=0.0)
        with open(f"{work}/scenes/T30TWN_{scene}_{ts}_{band}.tif", "wb") as f:
            f.write(blob)

store = CatalogStore(f"{work}/data")
store.register_product(ProductDefinition(
    name="s2",
    bands=(BandDef("B04", "uint16", 0.0, 1e-4, 0),
           BandDef("B08", "uint16", 0.0, 1e-4, 0)),
    crs=CrsId(32630),
    resolution=(10.0, 10.0),
    filename_rule="T30TWN_{scene}_{timestamp}_{band}.tif",
    timestamp_format="%Y%m%dT%H%M%S",
    source_kind="local_dir",
    source_root=f"{work}/scenes",
    band_roles={"red": "B04", "nir": "B08"},
))
report = store.scan_source("s2")
assert len(report.records) == 2 and not report.errors, report.errors

feats = []
for i in range(1000):
    col, row = i % 40, i // 40
    x0 = 500100.0 + col * 120.0
    y0 = 4795200.0 + row * 180.0
    ring = [[x0, y0], [x0 + 60.0, y0], [x0 + 60.0, y0 + 60.0],
            [x0, y0 + 60.0], [x0, y0]]
    feats.append({"type": "Feature", "id": f"q{i:04d}",
                  "properties": {}, "geometry": {"type": "Polygon",
                                                 "coordinates": [ring]}})
doc = {"type": "FeatureCollection", "features": feats}
n = store.ingest_polygons(json.dumps(doc).encode(), crs_override=CrsId(32630))
assert n == 1000, n
store.close()
print("seeded")
`;

let work: string;
let server: ChildProcess | null = null;
let base = "";

const recorded: Array<{ method: string; url: string; doc: unknown }> = [];

function lastRecorded(pred: (r: { method: string; url: string }) => boolean): unknown {
  for (let i = recorded.length - 1; i >= 0; i--) {
    if (pred(recorded[i]!)) return recorded[i]!.doc;
  }
  throw new Error("no recorded request matched");
}

const recordingFetch: FetchLike = async (input, init) => {
  const res = await globalThis.fetch(input, init as RequestInit);
  const doc: unknown = await res
    .clone()
    .json()
    .catch(() => null);
  recorded.push({ method: init?.method ?? "GET", url: input, doc });
  return { ok: res.ok, status: res.status, json: async () => doc };
};

beforeAll(async () => {
  expect(typeof globalThis.fetch, "node fetch must be available").toBe("function");
  work = mkdtempSync(join(tmpdir(), "ui-e2e-"));
  execFileSync("mkdir", ["-p", join(work, "scenes")]);
  execFileSync("python3", ["-", work], { input: SEED, stdio: ["pipe", "inherit", "inherit"] });

  server = spawn(
    "python3",
    ["-m", "minicube.cli", "--data-root", join(work, "data"), "serve",
     "--listen", "127.0.0.1:0", "--scan-interval", "0"],
    { cwd: REPO, stdio: ["ignore", "pipe", "pipe"] },
  );
  base = await new Promise<string>((resolveBase, reject) => {
    let err = "";
    const timer = setTimeout(() => reject(new Error(`server never bound: ${err}`)), 20000);
    server!.stderr!.on("data", (chunk: Buffer) => {
      err += chunk.toString();
      const m = err.match(/serving on (127\.0\.0\.1:\d+)/);
      if (m) {
        clearTimeout(timer);
        resolveBase(`http://${m[1]}`);
      }
    });
    server!.on("exit", (code) => reject(new Error(`server exited ${code}: ${err}`)));
  });
}, 120000);

afterAll(async () => {
  if (server && server.exitCode === null) {
    server.kill("SIGINT");
    await new Promise((r) => server!.once("exit", r));
  }
  if (work) rmSync(work, { recursive: true, force: true });
});

describe("live service", () => {
  it("loads 1000 polygons, colors from live data, labels 5, all numbers from payloads", async () => {
    const root = document.createElement("div");
    document.body.appendChild(root);
    const api = new Api(base, recordingFetch);
    const app: App = createApp(root, api, { author: "e2e" });
    await app.boot();
    expect(root.querySelector<HTMLElement>(".mc-banner")!.hidden).toBe(true);

    // every polygon rendered
    const paths = root.querySelectorAll<SVGPathElement>("path[data-pid]");
    expect(paths.length).toBe(1000);

    // colors are a pure function of the /query payload at the shown date
    const queryDoc = lastRecorded(
      (r) => r.method === "POST" && r.url.endsWith("/query"),
    ) as { rows: Array<{ polygon_id: string; timestamp: string; mean: number | null }> };
    const shownTs = root.querySelector(".mc-date-label")!.textContent!;
    const means = new Map<string, number | null>();
    let lo = Infinity;
    let hi = -Infinity;
    for (const row of queryDoc.rows) {
      if (row.timestamp !== shownTs) continue;
      means.set(row.polygon_id, row.mean);
      if (row.mean !== null) {
        lo = Math.min(lo, row.mean);
        hi = Math.max(hi, row.mean);
      }
    }
    expect(means.size).toBe(1000);
    let colored = 0;
    for (const p of paths) {
      const m = means.get(p.getAttribute("data-pid")!);
      const want = m === null || m === undefined ? NEUTRAL : fillFor(m, lo, hi);
      expect(p.getAttribute("fill")).toBe(want);
      if (want !== NEUTRAL) colored += 1;
    }
    expect(colored).toBeGreaterThan(900);

    // legend endpoints equal payload means verbatim
    expect(root.querySelector(".mc-legend-lo")!.textContent).toBe(String(lo));
    expect(root.querySelector(".mc-legend-hi")!.textContent).toBe(String(hi));

    // click five plots (toggles selection, opens the series panel)
    const chosen = ["q0000", "q0001", "q0002", "q0003", "q0004"];
    for (const pid of chosen) {
      const path = root.querySelector(`path[data-pid="${pid}"]`)!;
      path.dispatchEvent(new MouseEvent("mousedown", { bubbles: true, clientX: 5, clientY: 5 }));
      path.dispatchEvent(new MouseEvent("mouseup", { bubbles: true, clientX: 5, clientY: 5 }));
    }
    await app.settle();
    expect(Array.from(app.state().selection).sort()).toEqual(chosen);

    // panel shows the last-clicked plot with payload numbers
    const seriesDoc = lastRecorded(
      (r) => r.method === "GET" && r.url.includes("/timeseries?") && r.url.includes("q0004"),
    ) as { series: Array<{ timestamp: string; mean: number | null; valid_count: number; count: number }> };
    const rows = Array.from(
      root.querySelectorAll<HTMLTableRowElement>(".mc-series tbody tr"),
    );
    expect(rows.length).toBe(seriesDoc.series.length);
    rows.forEach((tr, i) => {
      const pt = seriesDoc.series[i]!;
      expect(tr.cells[0]!.textContent).toBe(pt.timestamp);
      expect(tr.cells[1]!.textContent).toBe(pt.mean === null ? "" : String(pt.mean));
      expect(tr.cells[2]!.textContent).toBe(`${pt.valid_count}/${pt.count}`);
    });

    // label them
    const label = root.querySelector<HTMLInputElement>(".mc-label")!;
    label.value = "test";
    label.dispatchEvent(new Event("input", { bubbles: true }));
    root.querySelector<HTMLButtonElement>(".mc-apply")!.click();
    await app.settle();
    expect(root.querySelector(".mc-annstatus")!.textContent).toBe("5/5 annotated");

    // annotations are retrievable per polygon, straight from the server
    for (const pid of chosen) {
      const res = await globalThis.fetch(`${base}/annotations?polygon_id=${pid}`);
      const items = (await res.json()) as Array<{ label: string; polygon_id: string }>;
      expect(items.length).toBe(1);
      expect(items[0]!.label).toBe("test");
      expect(items[0]!.polygon_id).toBe(pid);
    }
    const all = (await (await globalThis.fetch(`${base}/annotations`)).json()) as unknown[];
    expect(all.length).toBe(5);
    expect(paths[0]!.classList.contains("annotated")).toBe(true);

    console.log("[acceptance] ui live flow (1000 polygons, live colors, 5 labels): PASS");
  }, 120000);

  it("slider move re-queries the live service for a single timestamp", async () => {
    const root = document.createElement("div");
    document.body.appendChild(root);
    const api = new Api(base, recordingFetch);
    const app = createApp(root, api, {});
    await app.boot();

    const before = recorded.filter((r) => r.url.endsWith("/query")).length;
    const slider = root.querySelector<HTMLInputElement>(".mc-date")!;
    slider.value = "0";
    slider.dispatchEvent(new Event("input", { bubbles: true }));
    await app.settle();

    const queries = recorded.filter((r) => r.url.endsWith("/query"));
    expect(queries.length).toBe(before + 1);
    const body = queries[queries.length - 1]!.doc as { rows: Array<{ timestamp: string }> };
    const shown = root.querySelector(".mc-date-label")!.textContent!;
    expect(body.rows.every((r) => r.timestamp === shown)).toBe(true);
    expect(body.rows.length).toBe(1000);
  }, 60000);
});
