"""Thin command-line client over the service endpoints.

Without --server the commands run against an in-process instance of the
app, so the same request/response path is exercised either way. Reports
land under --out as report.json plus the rendered CSV files; nothing is
written when a request fails.
"""

from __future__ import annotations

import json
import os
import sys
from typing import Optional

import click
import httpx

from . import __version__


class InProcessClient:
    """Synchronous facade over the app via httpx's ASGI transport."""

    def __init__(self, app):
        self._app = app

    def _request(self, method: str, path: str, **kwargs) -> httpx.Response:
        import asyncio

        async def go():
            transport = httpx.ASGITransport(app=self._app)
            async with httpx.AsyncClient(transport=transport,
                                         base_url="http://service") as client:
                return await client.request(method, path, **kwargs)

        return asyncio.run(go())

    def post(self, path: str, **kwargs) -> httpx.Response:
        return self._request("POST", path, **kwargs)

    def get(self, path: str, **kwargs) -> httpx.Response:
        return self._request("GET", path, **kwargs)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _client(server: Optional[str]):
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    from .service import create_app
    return InProcessClient(create_app())


def _post(client, path: str, payload: dict) -> dict:
    resp = client.post(path, json=payload)
    if resp.status_code != 200:
        try:
            body = resp.json()
        except Exception:
            body = resp.text
        click.echo(f"error: {path} -> {resp.status_code}: {body}", err=True)
        sys.exit(1)
    return resp.json()


def _write_report(report: dict, out: Optional[str], stem: str) -> None:
    if not out:
        return
    os.makedirs(out, exist_ok=True)
    # build everything in memory first; no partial reports on failure
    files = {f"{stem}.json": json.dumps(report, indent=2, sort_keys=True) + "\n"}
    for name, content in report.get("csv", {}).items():
        files[name] = content
    for name, content in files.items():
        with open(os.path.join(out, name), "w") as f:
            f.write(content)
    click.echo(f"wrote {', '.join(sorted(files))} to {out}")


def _parse_exits(value: Optional[str]) -> Optional[list[int]]:
    if not value:
        return None
    return [int(v) for v in value.split(",") if v.strip()]


def _data_payload(data: Optional[str], synthetic: Optional[int], seed: int,
                  split: str) -> dict:
    if data and synthetic:
        raise click.UsageError("--data and --synthetic are mutually exclusive")
    if data:
        kind = "cifar10_dir" if os.path.isdir(data) else "cifar10_file"
        return {"kind": kind, "path": data, "split": split}
    return {"kind": "synthetic", "n": synthetic or 200, "seed": seed}


def _load_run_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path) as f:
        return json.load(f)


server_option = click.option("--server", default=None, metavar="URL",
                             help="Remote service URL; defaults to in-process.")
out_option = click.option("--out", default=None, metavar="DIR",
                          help="Directory for report.json and CSV outputs.")
seed_option = click.option("--seed", default=0, type=int, show_default=True)


@click.group()
@click.version_option(version=__version__, prog_name="distree")
def main():
    """Early-exit inference benchmarks over a simulated edge cluster."""


@main.command()
@click.option("--arch", default="wrn16-1", show_default=True)
@click.option("--exits", default=None, metavar="LIST",
              help="Comma-separated exit boundaries, e.g. 1,4,6,9,11,14,16.")
@click.option("--classes", default=10, type=int, show_default=True)
@click.option("--students", default=2, type=int, show_default=True)
@server_option
@out_option
def flops(arch, exits, classes, students, server, out):
    """Static per-branch FLOPs/params table with reference deviations."""
    payload = {"arch": {"arch": arch, "exits": _parse_exits(exits),
                        "classes": classes, "students": students}}
    with _client(server) as client:
        report = _post(client, "/flops", payload)
    totals = report["totals"]
    click.echo(f"{arch} exits={report['metadata']['config']['exit_positions']}")
    for row in report["branches"]:
        dev = row.get("backbone_dev_pct")
        dev_s = f"  dev {dev:+.2f}%" if dev is not None else ""
        click.echo(f"  {row['branch']}: backbone {row['backbone_mflops']:.3f} MFLOPs"
                   f"  exit {row['exit_mflops']:.3f} MFLOPs{dev_s}")
    click.echo(f"  backbone total {totals['backbone_with_head_mflops']:.2f} MFLOPs; "
               f"params {totals['backbone_params']} "
               f"(+exits {totals['with_exits_params']}, "
               f"overhead {totals['exit_params_overhead_pct']:.2f}%)")
    _write_report(report, out, "flops")


@main.command()
@click.option("--weights", required=True, metavar="FILE")
@click.option("--config", "config_path", default=None, metavar="FILE",
              help="Run config JSON (policies, cluster, thresholds).")
@click.option("--data", default=None, metavar="PATH",
              help="CIFAR-10 binary batch file or directory.")
@click.option("--synthetic", default=None, type=int, metavar="N",
              help="Use N procedurally generated images instead of --data.")
@click.option("--split", default="test", show_default=True)
@click.option("--policies", "policies_csv", default=None, metavar="LIST",
              help="Comma-separated policy names (overrides --config).")
@click.option("--repeats", default=1, type=int, show_default=True)
@click.option("--sample-per-class", default=10, type=int, show_default=True,
              help="Stratified subsample size; 0 uses the full dataset.")
@click.option("--exit-eval", default="all", type=click.Choice(["all", "needed"]),
              show_default=True)
@seed_option
@server_option
@out_option
def bench(weights, config_path, data, synthetic, split, policies_csv, repeats,
          sample_per_class, exit_eval, seed, server, out):
    """Benchmark exit policies: accuracy, FLOPs, simulated latency."""
    cfg = _load_run_config(config_path)
    policies = cfg.get("policies")
    if policies_csv:
        policies = [{"policy": name.strip()} for name in policies_csv.split(",")]
    if not policies:
        policies = [{"policy": "last_exit"}, {"policy": "feature_diff"},
                    {"policy": "random"}, {"policy": "neighbor_similarity"}]
    payload = {
        "weights_path": weights,
        "data": _data_payload(data, synthetic, seed, split),
        "policies": policies,
        "cluster": cfg.get("cluster"),
        "seed": seed,
        "repeats": repeats,
        "sample_per_class": sample_per_class or None,
        "exit_eval": cfg.get("exit_eval", exit_eval),
    }
    with _client(server) as client:
        report = _post(client, "/bench", payload)
    for row in report["rows"]:
        click.echo(f"  {row['policy']:<20} acc {row['accuracy_pct']:6.2f}%  "
                   f"{row['mean_mflops']:7.2f} MFLOPs  "
                   f"{row['mean_latency_ms']:9.1f} ms (simulated)")
    _write_report(report, out, "bench")


@main.command()
@click.option("--weights", required=True, metavar="FILE")
@click.option("--data", default=None, metavar="PATH")
@click.option("--synthetic", default=None, type=int, metavar="N")
@click.option("--split", default="test", show_default=True)
@click.option("--sample-size", default=50, type=int, show_default=True)
@seed_option
@server_option
@out_option
def curves(weights, data, synthetic, split, sample_size, seed, server, out):
    """Per-exit confidence-measure series (mean and std per boundary)."""
    payload = {
        "weights_path": weights,
        "data": _data_payload(data, synthetic, seed, split),
        "seed": seed,
        "sample_size": sample_size,
    }
    with _client(server) as client:
        report = _post(client, "/curves", payload)
    for s in report["series"]:
        sim = s["neighbor_sim_mean"]
        sim_s = f"{sim:.4f}" if sim is not None else "-"
        click.echo(f"  exit {s['exit']}: diff {s['feature_diff_mean']:.4f} "
                   f"+-{s['feature_diff_std']:.4f}  neighbor-sim {sim_s}")
    _write_report(report, out, "curves")


@main.command()
@click.option("--weights", required=True, metavar="FILE")
@click.option("--data", default=None, metavar="PATH")
@click.option("--synthetic", default=None, type=int, metavar="N")
@click.option("--split", default="test", show_default=True)
@click.option("--offsets", required=True, metavar="LIST",
              help="Comma-separated uniform threshold offsets, e.g. -0.1,0,0.1.")
@click.option("--config", "config_path", default=None, metavar="FILE")
@click.option("--sample-per-class", default=10, type=int, show_default=True)
@click.option("--strict/--non-strict", default=True, show_default=True)
@seed_option
@server_option
@out_option
def sweep(weights, data, synthetic, split, offsets, config_path, sample_per_class,
          strict, seed, server, out):
    """Accuracy/FLOPs Pareto sweep over threshold offsets."""
    cfg = _load_run_config(config_path)
    payload = {
        "weights_path": weights,
        "data": _data_payload(data, synthetic, seed, split),
        "offsets": [float(v) for v in offsets.split(",") if v.strip()],
        "base_thresholds": cfg.get("base_thresholds"),
        "cluster": cfg.get("cluster"),
        "seed": seed,
        "strict": strict,
        "sample_per_class": sample_per_class or None,
    }
    with _client(server) as client:
        report = _post(client, "/sweep", payload)
    for row in report["rows"]:
        click.echo(f"  offset {row['offset']:+.3f}: acc {row['accuracy_pct']:6.2f}%  "
                   f"{row['mean_flops'] / 1e6:7.2f} MFLOPs  mean exit {row['mean_exit']:.2f}")
    _write_report(report, out, "sweep")


@main.command("inspect-weights")
@click.option("--weights", required=True, metavar="FILE")
@server_option
@out_option
def inspect_weights(weights, server, out):
    """Weight-file metadata, tensor inventory and fingerprint."""
    with _client(server) as client:
        info = _post(client, "/inspect-weights", {"path": weights})
    click.echo(f"fingerprint {info['fingerprint']}")
    click.echo(f"{info['tensor_count']} tensors, {info['file_bytes']} bytes, "
               f"arch_valid={info.get('arch_valid')}")
    _write_report(info, out, "weights-info")


@main.command("init-weights")
@click.option("--arch", default="wrn16-1", show_default=True)
@click.option("--exits", default=None, metavar="LIST")
@click.option("--classes", default=10, type=int, show_default=True)
@click.option("--students", default=2, type=int, show_default=True)
@click.option("--out", "out_file", required=True, metavar="FILE")
@seed_option
@server_option
def init_weights(arch, exits, classes, students, out_file, seed, server):
    """Write a randomly initialized weight file (useful for smoke runs)."""
    payload = {"arch": {"arch": arch, "exits": _parse_exits(exits),
                        "classes": classes, "students": students}, "seed": seed}
    with _client(server) as client:
        resp = client.post("/init-weights", json=payload)
        if resp.status_code != 200:
            click.echo(f"error: {resp.status_code}: {resp.text}", err=True)
            sys.exit(1)
        content = resp.content
    with open(out_file, "wb") as f:
        f.write(content)
    click.echo(f"wrote {len(content)} bytes to {out_file}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, type=int, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import app
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
