// Plain-coordinate projection: fit the polygon set's bounding box into the
// viewport with a 5% margin, y flipped so north is up. No basemap math.

import type { PolygonFeature } from "./api.js";

export type Bounds = { minX: number; minY: number; maxX: number; maxY: number };

export type Projection = {
  toScreen(x: number, y: number): [number, number];
  width: number;
  height: number;
};

export function dataBounds(features: PolygonFeature[]): Bounds {
  let minX = Infinity;
  let minY = Infinity;
  let maxX = -Infinity;
  let maxY = -Infinity;
  for (const f of features) {
    for (const ring of f.geometry.coordinates) {
      for (const pos of ring) {
        const x = pos[0]!;
        const y = pos[1]!;
        if (x < minX) minX = x;
        if (x > maxX) maxX = x;
        if (y < minY) minY = y;
        if (y > maxY) maxY = y;
      }
    }
  }
  if (minX > maxX) return { minX: 0, minY: 0, maxX: 1, maxY: 1 };
  return { minX, minY, maxX, maxY };
}

export function fitProjection(bounds: Bounds, viewWidth: number): Projection {
  const spanX = bounds.maxX - bounds.minX || 1;
  const spanY = bounds.maxY - bounds.minY || 1;
  const mx = 0.05 * spanX;
  const my = 0.05 * spanY;
  const scale = viewWidth / (spanX + 2 * mx);
  const height = (spanY + 2 * my) * scale;
  return {
    width: viewWidth,
    height,
    toScreen(x, y) {
      return [(x - bounds.minX + mx) * scale, (bounds.maxY + my - y) * scale];
    },
  };
}

/** SVG path with all rings; fill-rule evenodd leaves holes open. */
export function featurePath(f: PolygonFeature, proj: Projection): string {
  const parts: string[] = [];
  for (const ring of f.geometry.coordinates) {
    const cmds: string[] = [];
    for (const pos of ring) {
      const [sx, sy] = proj.toScreen(pos[0]!, pos[1]!);
      cmds.push(`${cmds.length ? "L" : "M"}${round2(sx)} ${round2(sy)}`);
    }
    cmds.push("Z");
    parts.push(cmds.join(" "));
  }
  return parts.join(" ");
}

export function screenBBox(f: PolygonFeature, proj: Projection): Bounds {
  let minX = Infinity;
  let minY = Infinity;
  let maxX = -Infinity;
  let maxY = -Infinity;
  for (const ring of f.geometry.coordinates) {
    for (const pos of ring) {
      const [sx, sy] = proj.toScreen(pos[0]!, pos[1]!);
      if (sx < minX) minX = sx;
      if (sx > maxX) maxX = sx;
      if (sy < minY) minY = sy;
      if (sy > maxY) maxY = sy;
    }
  }
  return { minX, minY, maxX, maxY };
}

export function boxesIntersect(a: Bounds, b: Bounds): boolean {
  return a.minX <= b.maxX && b.minX <= a.maxX && a.minY <= b.maxY && b.minY <= a.maxY;
}

function round2(v: number): number {
  return Math.round(v * 100) / 100;
}
