"""Command-line client for the pipeline service.

Subcommands mirror the service endpoints one-to-one. Without `--server` the
requests run against an in-process instance of the app, so no daemon is
needed; with `--server http://host:port` the same requests go to a remote
service. Exit code is 0 iff no stage error occurred; partial failures list
the affected image ids on stderr.
"""

from __future__ import annotations

import sys
from typing import Any

import click
import httpx

from .config import JOBS_ENV_VAR


class ServiceClient:
    """Thin HTTP wrapper: remote server or the in-process app."""

    def __init__(self, server: str | None):
        if server:
            self._client = httpx.Client(base_url=server, timeout=None)
        else:
            from fastapi.testclient import TestClient

            from .service.app import create_app

            self._client = TestClient(create_app(), raise_server_exceptions=False)

    def get(self, path: str) -> httpx.Response:
        return self._client.get(path)

    def post(self, path: str, payload: dict[str, Any]) -> httpx.Response:
        return self._client.post(path, json=payload)


def _config_payload(kwargs: dict[str, Any]) -> dict[str, Any] | None:
    keys = (
        "layers",
        "regions_per_layer",
        "clusters",
        "connectivity",
        "similarity_ratio",
        "zero_threshold",
        "normalization",
        "seed",
        "jobs",
        "config_file",
    )
    overrides = {key: kwargs[key] for key in keys if kwargs.get(key) is not None}
    return overrides or None


def _config_options(command):
    options = [
        click.option("--config", "config_file", type=click.Path(exists=True), default=None,
                     help="Flat key=value config file; flags override it."),
        click.option("--layers", default=None, help="Comma-separated layer tags."),
        click.option("--regions-per-layer", "regions_per_layer", type=int, default=None),
        click.option("--clusters", type=int, default=None),
        click.option("--connectivity", type=click.Choice(["4", "8"]), default=None),
        click.option("--similarity-ratio", "similarity_ratio", default=None,
                     help="Coupling ratio >= 1, or 'disabled'."),
        click.option("--zero-threshold", "zero_threshold", type=float, default=None),
        click.option("--normalization", default=None,
                     help="'intra+global-L2' (default) or 'none'."),
        click.option("--seed", type=int, default=None),
        click.option("--jobs", type=int, default=None, envvar=JOBS_ENV_VAR,
                     help=f"Parallel per-image workers (${JOBS_ENV_VAR})."),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _call(client: ServiceClient, path: str, payload: dict[str, Any]) -> dict[str, Any]:
    response = client.post(path, payload)
    body = response.json()
    if response.status_code != 200:
        error = body.get("error", "error") if isinstance(body, dict) else "error"
        detail = body.get("detail", response.text) if isinstance(body, dict) else response.text
        stage = body.get("stage") if isinstance(body, dict) else None
        prefix = f"[{stage}] " if stage else ""
        click.echo(f"error ({error}): {prefix}{detail}", err=True)
        sys.exit(1)
    return body


def _report_failures(body: dict[str, Any]) -> bool:
    failures = body.get("failures") or []
    for failure in failures:
        click.echo(f"failed {failure['image_id']}: {failure['message']}", err=True)
    return bool(failures)


@click.group()
@click.option("--server", envvar="ATTNVLAD_SERVER", default=None,
              help="Base URL of a running service; default runs in-process.")
@click.pass_context
def main(ctx: click.Context, server: str | None):
    """Regional-attention VLAD place retrieval pipeline."""
    ctx.obj = ServiceClient(server)


@main.command("info")
@click.pass_obj
def info_cmd(client: ServiceClient):
    """Print version, format versions and default configuration."""
    response = client.get("/info")
    body = response.json()
    click.echo(f"{body['name']} {body['version']}")
    click.echo("format versions: " + ", ".join(
        f"{name}={version}" for name, version in sorted(body["format_versions"].items())
    ))
    click.echo("defaults:")
    for key, value in body["defaults"].items():
        click.echo(f"  {key}={value}")
    click.echo("subcommands: " + ", ".join(body["subcommands"]))


@main.command("extract-regions")
@click.option("--input", "tensor_dir", required=True, type=click.Path(),
              help="Directory of <image_id>.<layer>.atn tensors.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--dump-regions", "dump_dir", type=click.Path(), default=None,
              help="Also write per-image region debug dumps here.")
@_config_options
@click.pass_obj
def extract_cmd(client: ServiceClient, tensor_dir, out_dir, dump_dir, **kwargs):
    """Extract regional features: tensors -> one .feat file per image."""
    payload = {
        "tensor_dir": tensor_dir,
        "out_dir": out_dir,
        "dump_dir": dump_dir,
        "config": _config_payload(kwargs),
    }
    body = _call(client, "/extract-regions", payload)
    click.echo(f"{body['processed']} images processed")
    if _report_failures(body):
        sys.exit(1)


@main.command("train-codebook")
@click.option("--input", "features_dir", required=True, type=click.Path(),
              help="Directory of .feat files (training corpus).")
@click.option("--clusters", type=int, default=128, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--max-iters", type=int, default=100, show_default=True)
@click.option("--tol", type=float, default=1e-4, show_default=True)
@click.pass_obj
def train_cmd(client: ServiceClient, features_dir, clusters, seed, out, max_iters, tol):
    """Train the k-means regional codebook."""
    body = _call(client, "/train-codebook", {
        "features_dir": features_dir,
        "out": out,
        "clusters": clusters,
        "seed": seed,
        "max_iters": max_iters,
        "tol": tol,
    })
    click.echo(
        f"trained {body['clusters']} clusters (K={body['channels']}) on {body['num_rows']} rows "
        f"from {body['num_sets']} images in {body['iterations']} iterations; "
        f"inertia {body['inertia']:.6g}"
    )
    click.echo(f"wrote {body['codebook']}")


@main.command("encode")
@click.option("--features", "features_dir", required=True, type=click.Path())
@click.option("--codebook", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--normalization", default=None)
@click.option("--jobs", type=int, default=None, envvar=JOBS_ENV_VAR)
@click.pass_obj
def encode_cmd(client: ServiceClient, features_dir, codebook, out_dir, normalization, jobs):
    """Encode feature sets into VLAD descriptor files."""
    body = _call(client, "/encode", {
        "features_dir": features_dir,
        "codebook": codebook,
        "out_dir": out_dir,
        "normalization": normalization,
        "jobs": jobs,
    })
    click.echo(f"{body['processed']} descriptors written")
    for image_id in body.get("degenerate", []):
        click.echo(f"warning: degenerate zero descriptor for {image_id}", err=True)
    if _report_failures(body):
        sys.exit(1)


@main.command("match")
@click.option("--query", required=True, type=click.Path(),
              help="A .vlad file or a directory of them.")
@click.option("--refs", required=True, type=click.Path())
@click.option("--top", type=int, default=None, help="Truncate stored rankings to k entries.")
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def match_cmd(client: ServiceClient, query, refs, top, out):
    """Rank queries against the reference descriptors."""
    body = _call(client, "/match", {"query": query, "refs": refs, "top": top, "out": out})
    click.echo(
        f"matched {body['num_queries']} queries against {body['num_references']} references"
    )
    click.echo(f"wrote {body['matches']}")


@main.command("evaluate")
@click.option("--matches", required=True, type=click.Path())
@click.option("--truth", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--plot", type=click.Path(), default=None)
@click.pass_obj
def evaluate_cmd(client: ServiceClient, matches, truth, out, plot):
    """Compute the PR curve and AUC against ground truth."""
    body = _call(client, "/evaluate", {
        "matches": matches, "truth": truth, "out": out, "plot": plot,
    })
    click.echo(
        f"AUC-PR {body['auc']:.6f} over {body['num_queries']} queries / "
        f"{body['num_references']} references"
    )
    click.echo(f"wrote {body['report']}")


@main.command("bench")
@click.option("--queries", required=True, type=click.Path())
@click.option("--refs", required=True, type=click.Path())
@click.option("--codebook", required=True, type=click.Path())
@click.option("--m-f", "m_f", type=float, default=None,
              help="Forward-pass ms override (tensor-load time otherwise).")
@click.option("--u-e", "u_e", type=float, default=0.0, show_default=True)
@click.option("--u-m", "u_m", type=float, default=0.0, show_default=True)
@click.option("--iterations", type=int, default=3, show_default=True)
@click.option("--truth", type=click.Path(), default=None,
              help="Optional ground truth; adds a PR section to the report.")
@click.option("--plot", type=click.Path(), default=None)
@click.option("--out", required=True, type=click.Path())
@_config_options
@click.pass_obj
def bench_cmd(client: ServiceClient, queries, refs, codebook, m_f, u_e, u_m, iterations,
              truth, plot, out, **kwargs):
    """Measure stage timings and evaluate the retrieval-time/power models."""
    body = _call(client, "/bench", {
        "queries": queries,
        "refs": refs,
        "codebook": codebook,
        "out": out,
        "m_f": m_f,
        "u_e": u_e,
        "u_m": u_m,
        "iterations": iterations,
        "truth": truth,
        "plot": plot,
        "config": _config_payload(kwargs),
    })
    click.echo(f"retrieval time {body['retrieval_time_ms']:.3f} ms per query")
    click.echo(f"power {body['power_mah']:.4f} mAh")
    if body.get("auc") is not None:
        click.echo(f"AUC-PR {body['auc']:.6f}")
    click.echo(f"wrote {body['report']}")


@main.command("run")
@click.option("--queries", required=True, type=click.Path())
@click.option("--refs", required=True, type=click.Path())
@click.option("--truth", required=True, type=click.Path())
@click.option("--workdir", required=True, type=click.Path())
@click.option("--codebook", type=click.Path(), default=None,
              help="Existing codebook; trains one on the references otherwise.")
@click.option("--plot", type=click.Path(), default=None)
@_config_options
@click.pass_obj
def run_cmd(client: ServiceClient, queries, refs, truth, workdir, codebook, plot, **kwargs):
    """Full pipeline: extract, (train), encode, match, evaluate."""
    body = _call(client, "/run", {
        "queries": queries,
        "refs": refs,
        "truth": truth,
        "workdir": workdir,
        "codebook": codebook,
        "plot": plot,
        "config": _config_payload(kwargs),
    })
    click.echo(
        f"AUC-PR {body['auc']:.6f} over {body['num_queries']} queries / "
        f"{body['num_references']} references"
    )
    click.echo(f"codebook {body['codebook']}")
    click.echo(f"matches  {body['matches']}")
    click.echo(f"report   {body['report']}")


if __name__ == "__main__":
    main()
