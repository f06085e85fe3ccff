"""Command line front end.

Machine-readable results go to stdout (CSV or JSON, selected by --format);
human diagnostics go to stderr. Exit codes: 0 success, 1 user error,
2 internal error.
"""

from __future__ import annotations

import json
import os
import sys

import click

from minicube import export as export_mod
from minicube.catalog import CatalogStore, infer_product_definition
from minicube.engine import Engine, LoadQuery
from minicube.errors import MinicubeError
from minicube.geo import GEOGRAPHIC, CrsId, transform_polygon
from minicube.service import (
    Service,
    ServiceConfig,
    _product_from_body,
    load_config,
)
from minicube.timeutil import format_utc, parse_utc


def _store(ctx) -> CatalogStore:
    if ctx.obj.get("store") is None:
        ctx.obj["store"] = CatalogStore(ctx.obj["data_root"])
    return ctx.obj["store"]


def _echo_json(payload):
    click.echo(json.dumps(payload, indent=1))


class _Utc(click.ParamType):
    name = "utc-instant"

    def convert(self, value, param, ctx):
        try:
            return parse_utc(value)
        except ValueError:
            self.fail(f"{value!r} is not an ISO-8601 UTC instant", param, ctx)


UTC = _Utc()


@click.group()
@click.option("--data-root", envvar="MINICUBE_DATA_ROOT",
              default="minicube-data", show_default=True,
              help="Catalog directory.")
@click.pass_context
def cli(ctx, data_root):
    """Ingest satellite scenes, query polygon statistics, export tables."""
    ctx.ensure_object(dict)
    ctx.obj["data_root"] = data_root


@cli.command("register-product")
@click.option("--file", "path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON product definition.")
@click.pass_context
def register_product(ctx, path):
    """Register a product from a JSON definition file."""
    with open(path, "r", encoding="utf-8") as f:
        body = json.load(f)
    try:
        product = _product_from_body(body)
    except KeyError as e:
        raise ValueError(f"product file is missing field {e.args[0]!r}")
    except TypeError as e:
        raise ValueError(f"malformed product file: {e}")
    registered = _store(ctx).register_product(product)
    _echo_json({"registered": registered.name})


@cli.command("infer-product")
@click.option("--sample", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="One sample image of the product.")
@click.option("--name", required=True)
@click.option("--rule", required=True,
              help="Filename rule with {timestamp}/{band}/{scene} or regex.")
@click.option("--ts-format", required=True,
              help="strptime format of the timestamp capture.")
@click.option("--source-kind", type=click.Choice(["local_dir", "http_listing"]),
              default="local_dir", show_default=True)
@click.option("--source-root", default="", help="Directory or URL to scan.")
@click.option("--register/--no-register", default=False,
              help="Also store the inferred definition.")
@click.pass_context
def infer_product(ctx, sample, name, rule, ts_format, source_kind,
                  source_root, register):
    """Infer a product definition from one sample file."""
    with open(sample, "rb") as f:
        data = f.read()
    product = infer_product_definition(
        data, name, rule, ts_format, sample_name=os.path.basename(sample))
    if source_root or source_kind != "local_dir":
        from dataclasses import replace
        product = replace(product, source_kind=source_kind,
                          source_root=source_root)
    from minicube.service import _product_json
    _echo_json(_product_json(product))
    if register:
        _store(ctx).register_product(product)
        click.echo(f"registered {product.name}", err=True)


@cli.command()
@click.option("--product", required=True)
@click.argument("files", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def ingest(ctx, product, files):
    """Ingest one scene given its files."""
    rec = _store(ctx).ingest_scene(product, [os.path.abspath(f) for f in files])
    _echo_json({"dataset": rec.id, "timestamp": format_utc(rec.timestamp),
                "partial": rec.partial})


@cli.command()
@click.option("--product", required=True)
@click.pass_context
def scan(ctx, product):
    """Scan the product's source for new scenes."""
    report = _store(ctx).scan_source(product)
    _echo_json({"new_datasets": [r.id for r in report.records],
                "errors": report.errors})
    click.echo(f"{len(report.records)} new datasets, "
               f"{len(report.errors)} errors", err=True)


@cli.command("polygons-import")
@click.option("--file", "path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="GeoJSON FeatureCollection of polygons.")
@click.option("--crs", type=int, default=None,
              help="EPSG code of the coordinates (default 4326).")
@click.pass_context
def polygons_import(ctx, path, crs):
    """Import polygons from a GeoJSON file."""
    with open(path, "rb") as f:
        data = f.read()
    n = _store(ctx).ingest_polygons(
        data, crs_override=CrsId(crs) if crs else None)
    _echo_json({"imported": n})


def _query_options(fn):
    fn = click.option("--end", type=UTC, required=True)(fn)
    fn = click.option("--start", type=UTC, required=True)(fn)
    fn = click.option("--measure", "measures", multiple=True, required=True)(fn)
    fn = click.option("--product", "products", multiple=True, required=True)(fn)
    fn = click.option("--polygon", "polygons", multiple=True, required=True)(fn)
    return fn


def _run_query(ctx, polygons, products, measures, start, end, aggregate):
    q = LoadQuery(polygon_ids=polygons, products=products, measures=measures,
                  start=start, end=end, aggregate=aggregate)
    with Engine(_store(ctx)) as engine:
        return q, engine.load(q)


@cli.command()
@_query_options
@click.option("--aggregate", type=click.Choice(["zonal", "per_pixel"]),
              default="zonal", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]),
              default="csv", show_default=True)
@click.pass_context
def query(ctx, polygons, products, measures, start, end, aggregate, fmt):
    """Run a query and print the observation table."""
    q, table = _run_query(ctx, polygons, products, measures, start, end,
                          aggregate)
    if fmt == "csv":
        click.get_binary_stream("stdout").write(export_mod.csv_bytes(table))
    else:
        from minicube.service import _zonal_rows_json
        rows = (_zonal_rows_json(table) if table.mode == "zonal" else
                [list(r[:2]) + [format_utc(r[2])] + list(r[3:])
                 for r in table.rows])
        _echo_json({"mode": table.mode, "fingerprint": q.fingerprint(),
                    "rows": rows})


@cli.command()
@click.option("--polygon", required=True)
@click.option("--product", required=True)
@click.option("--measure", required=True)
@click.option("--start", type=UTC, required=True)
@click.option("--end", type=UTC, required=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]),
              default="csv", show_default=True)
@click.pass_context
def timeseries(ctx, polygon, product, measure, start, end, fmt):
    """Print one polygon's zonal statistics over time."""
    with Engine(_store(ctx)) as engine:
        series = engine.timeseries(polygon, product, measure, start, end)
    if fmt == "json":
        from minicube.service import _stats_json
        _echo_json({"polygon_id": polygon, "product": product,
                    "measure": measure,
                    "series": [{"timestamp": format_utc(ts), **_stats_json(s)}
                               for ts, s in series]})
        return
    import csv as csv_lib
    w = csv_lib.writer(click.get_text_stream("stdout"))
    w.writerow(("timestamp", "count", "valid_count", "mean", "std", "min",
                "max", "median"))
    for ts, s in series:
        w.writerow((format_utc(ts), s.count, s.valid_count,
                    *("" if v is None else repr(v)
                      for v in (s.mean, s.std, s.min, s.max, s.median))))


def _render_figures(table, figures_dir):
    """One PNG per (polygon, product, measure) mean series in the table."""
    os.makedirs(figures_dir, exist_ok=True)
    series = {}
    for pid, product, ts, measure, s in table.rows:
        if s.mean is not None:
            series.setdefault((pid, product, measure), []).append((ts, s.mean))
    written = []
    for (pid, product, measure), points in sorted(series.items()):
        stem = "_".join(x.replace(os.sep, "-") for x in (pid, product, measure))
        path = os.path.join(figures_dir, f"{stem}.png")
        export_mod.render_timeseries_png(
            points, path, title=f"{pid} {product} {measure}")
        written.append(path)
    return written


@cli.command()
@_query_options
@click.option("--aggregate", type=click.Choice(["zonal", "per_pixel"]),
              default="zonal", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Destination data file.")
@click.option("--format", "fmt", type=click.Choice(["csv", "geojson"]),
              default="csv", show_default=True)
@click.option("--figures", type=click.Path(file_okay=False), default=None,
              help="Also render one time-series PNG per polygon/measure here.")
@click.pass_context
def export(ctx, polygons, products, measures, start, end, aggregate, out,
           fmt, figures):
    """Export a query result to a file (plus manifest sidecar)."""
    q, table = _run_query(ctx, polygons, products, measures, start, end,
                          aggregate)
    poly_map = {}
    if fmt == "geojson":
        store = _store(ctx)
        for pid in polygons:
            p = store.get_polygon(pid)
            poly_map[pid] = (p if p.crs.is_geographic
                             else transform_polygon(p, GEOGRAPHIC))
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    manifest = export_mod.export_table(table, out, fmt, q.fingerprint(),
                                       poly_map)
    summary = {"destination": out, "rows": len(table.rows),
               "covered": len(manifest.covered),
               "fingerprint": manifest.fingerprint}
    if figures:
        if table.mode != "zonal":
            raise click.UsageError("--figures needs a zonal table")
        written = _render_figures(table, figures)
        summary["figures"] = len(written)
        click.echo(f"wrote {len(written)} figures to {figures}", err=True)
    _echo_json(summary)


@cli.command()
@_query_options
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Previously exported CSV to fold new rows into.")
@click.pass_context
def merge(ctx, polygons, products, measures, start, end, out):
    """Merge a query result into an existing export."""
    q, table = _run_query(ctx, polygons, products, measures, start, end,
                          "zonal")
    before = None
    if os.path.exists(out):
        before = len(export_mod.read_manifest(out).covered)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    manifest = export_mod.merge_incremental(out, table, q.fingerprint())
    _echo_json({"destination": out, "covered": len(manifest.covered),
                "added": len(manifest.covered) - (before or 0)})


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True,
              dir_okay=False), default=None, help="key=value config file.")
@click.option("--listen", default=None, help="host:port to bind.")
@click.option("--scan-interval", type=float, default=None,
              help="Seconds between source scans (0 disables).")
@click.option("--static-root", default=None, help="UI bundle directory.")
@click.pass_context
def serve(ctx, config_path, listen, scan_interval, static_root):
    """Run the HTTP service."""
    config = load_config(config_path)
    overrides = {}
    if listen is not None:
        overrides["listen"] = listen
    if scan_interval is not None:
        overrides["scan_interval"] = scan_interval
    if static_root is not None:
        overrides["static_root"] = static_root
    if ctx.obj["data_root"] != "minicube-data":
        overrides["data_root"] = ctx.obj["data_root"]
    if overrides:
        from dataclasses import replace
        config = replace(config, **overrides)
    service = Service(config)
    service.start()
    click.echo(f"serving on {service.address[0]}:{service.address[1]}",
               err=True)
    try:
        import time
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        click.echo("shutting down", err=True)
    finally:
        service.stop()


@cli.group()
def render():
    """Render static SVG/PNG visualizations."""


@render.command("polygon")
@click.option("--id", "pid", required=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--product", default=None,
              help="Color cells from this product's data.")
@click.option("--measure", default=None)
@click.option("--timestamp", type=UTC, default=None)
@click.pass_context
def render_polygon(ctx, pid, out, product, measure, timestamp):
    """Draw a polygon outline, optionally colored by a measure."""
    store = _store(ctx)
    poly = store.get_polygon(pid)
    region = patch = None
    if product or measure or timestamp:
        if not (product and measure and timestamp):
            raise click.UsageError(
                "cell coloring needs --product, --measure and --timestamp")
        with Engine(store) as engine:
            patch, region = engine.measure_patch(pid, product, measure,
                                                 timestamp)
        poly = transform_polygon(poly, store.get_product(product).crs)
    svg = export_mod.render_polygon_svg(poly, region=region, patch=patch)
    with open(out, "wb") as f:
        f.write(svg)
    click.echo(f"wrote {out}", err=True)


@render.command("timeseries")
@click.option("--polygon", required=True)
@click.option("--product", required=True)
@click.option("--measure", required=True)
@click.option("--start", type=UTC, required=True)
@click.option("--end", type=UTC, required=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Output file; .svg or .png by extension.")
@click.pass_context
def render_timeseries(ctx, polygon, product, measure, start, end, out):
    """Plot one polygon's mean time series."""
    with Engine(_store(ctx)) as engine:
        series = engine.timeseries(polygon, product, measure, start, end)
    points = [(ts, s.mean) for ts, s in series if s.mean is not None]
    if not points:
        raise click.ClickException("no valid observations in the interval")
    if out.lower().endswith(".png"):
        export_mod.render_timeseries_png(points, out,
                                         title=f"{polygon} {product} {measure}")
    else:
        with open(out, "wb") as f:
            f.write(export_mod.render_timeseries_svg(points))
    click.echo(f"wrote {out}", err=True)


def main(argv=None):
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False, obj={})
        return 0
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except (MinicubeError, ValueError) as e:
        msg = getattr(e, "message", None) or str(e)
        click.echo(f"error: {msg}", err=True)
        return 1
    except OSError as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except Exception as e:  # noqa: BLE001 - last-resort diagnostic
        click.echo(f"internal error: {type(e).__name__}: {e}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
