"""Command-line client for the inspection service.

Every subcommand is a thin wrapper: files are read here, work happens behind
the service API (an in-process app by default, a remote server with
--server), and results are written back to disk or stdout. Exit codes:
0 success, 1 usage error, 2 input error; verdicts never change the code.
"""

from __future__ import annotations

import base64
import json
import sys
from pathlib import Path

import click
import httpx

from . import InputError, __version__
from .pipeline import DETECTORS, PipelineConfig, ingest, emit_report


class _InProcessTransport(httpx.BaseTransport):
    """Serve requests from the ASGI app inside this process, synchronously."""

    def __init__(self, app) -> None:
        self._asgi = httpx.ASGITransport(app=app)

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        import asyncio

        async def call() -> tuple[int, httpx.Headers, bytes]:
            response = await self._asgi.handle_async_request(request)
            body = await response.aread()
            return response.status_code, response.headers, body

        status, headers, body = asyncio.run(call())
        headers.pop("content-length", None)
        return httpx.Response(status_code=status, headers=headers, content=body,
                              request=request)


class ServiceClient:
    """HTTP client; without --server it mounts the app in-process."""

    def __init__(self, server: str | None) -> None:
        if server:
            self._client = httpx.Client(base_url=server.rstrip("/"), timeout=600.0)
        else:
            from .service.app import create_app
            self._client = httpx.Client(transport=_InProcessTransport(create_app()),
                                        base_url="http://evmtrail.internal",
                                        timeout=600.0)

    def post(self, path: str, payload: dict) -> dict:
        try:
            response = self._client.post(path, json=payload)
        except httpx.HTTPError as exc:
            raise InputError(f"service unreachable: {exc}") from exc
        if response.status_code == 400:
            raise InputError(response.json().get("detail", "bad request"))
        if response.status_code == 422:
            raise InputError(f"malformed request: {response.text}")
        response.raise_for_status()
        return response.json()


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def _load_config(config_path: str | None, seed: int | None) -> PipelineConfig:
    cfg = PipelineConfig.from_file(config_path) if config_path else PipelineConfig()
    if seed is not None:
        cfg.seed = seed
    return cfg


def _manifest_payloads(manifest: str, require_labels: bool) -> tuple[list[dict], list[str]]:
    entries, errors = ingest(manifest, require_labels=require_labels)
    base = Path(manifest).parent
    payloads = []
    for entry in entries:
        try:
            contracts = []
            for file_name in entry.contract_files:
                path = Path(file_name)
                if not path.is_absolute():
                    path = base / path
                contracts.append({"contract_id": path.stem, "code": _read_text(str(path))})
        except InputError as exc:
            errors.append(f"{entry.protocol_id}: {exc}")
            continue
        payloads.append({
            "protocol_id": entry.protocol_id,
            "contracts": contracts,
            "label": entry.label,
            "chain": entry.chain,
            "entry_hints": entry.entry_hints,
        })
    return payloads, errors


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="Key-value config file.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the config seed.")(fn)
    return fn


@click.group()
@click.version_option(__version__)
@click.option("--server", envvar="EVMTRAIL_SERVER", default=None,
              help="Service URL; default runs the service in-process.")
@click.pass_context
def cli(ctx: click.Context, server: str | None) -> None:
    """Bytecode-level inspection of multi-contract EVM protocols."""
    ctx.obj = ServiceClient(server)


@cli.command()
@click.argument("hex_file", type=click.Path())
@common_options
@click.pass_obj
def disasm(client: ServiceClient, hex_file: str, config_path, seed) -> None:
    """Disassemble a hex bytecode file to a textual listing."""
    out = client.post("/v1/disasm", {"code": _read_text(hex_file)})
    click.echo(out["listing"], nl=False)


@cli.command()
@click.argument("hex_file", type=click.Path())
@common_options
@click.pass_obj
def cfg(client: ServiceClient, hex_file: str, config_path, seed) -> None:
    """Dump one contract's control-flow structure as JSON."""
    out = client.post("/v1/cfg", {"contract_id": Path(hex_file).stem,
                                  "code": _read_text(hex_file)})
    click.echo(json.dumps(out["cfg"], sort_keys=True, indent=2))


@cli.command()
@click.argument("directory", type=click.Path())
@click.option("--out", "out_file", type=click.Path(), default=None)
@common_options
@click.pass_obj
def link(client: ServiceClient, directory: str, out_file, config_path, seed) -> None:
    """Link every *.hex contract in a directory into one cross-contract graph."""
    config = _load_config(config_path, seed)
    files = sorted(Path(directory).glob("*.hex"))
    if not files:
        raise InputError(f"no .hex files in {directory}")
    contracts = [{"contract_id": f.stem, "code": _read_text(str(f))} for f in files]
    out = client.post("/v1/link", {"contracts": contracts, "no_link": config.no_link})
    doc = json.dumps(out["linked"], sort_keys=True, indent=2)
    if out_file:
        Path(out_file).write_text(doc + "\n")
        click.echo(json.dumps(out["report"], sort_keys=True))
    else:
        click.echo(doc)


@cli.command()
@click.argument("linked_json", type=click.Path())
@click.option("--out", "out_file", type=click.Path(), default=None)
@common_options
@click.pass_obj
def paths(client: ServiceClient, linked_json: str, out_file, config_path, seed) -> None:
    """Enumerate bounded data paths through a linked graph, as JSON lines."""
    config = _load_config(config_path, seed)
    try:
        linked = json.loads(_read_text(linked_json))
    except json.JSONDecodeError as exc:
        raise InputError(f"{linked_json}: invalid JSON: {exc.msg}") from exc
    out = client.post("/v1/paths", {
        "linked": linked,
        "bounds": {"max_block_visits": config.max_block_visits,
                   "max_path_length": config.max_path_length,
                   "max_paths_per_entry": config.max_paths_per_entry},
    })
    lines = "".join(json.dumps(p, sort_keys=True) + "\n" for p in out["paths"])
    if out_file:
        Path(out_file).write_text(lines)
    else:
        click.echo(lines, nl=False)


@cli.command()
@click.argument("paths_jsonl", type=click.Path())
@common_options
@click.pass_obj
def validate(client: ServiceClient, paths_jsonl: str, config_path, seed) -> None:
    """Annotate each path line with its feasibility verdict."""
    config = _load_config(config_path, seed)
    docs = []
    for lineno, line in enumerate(_read_text(paths_jsonl).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            docs.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise InputError(f"{paths_jsonl}:{lineno}: invalid JSON: {exc.msg}") from exc
    out = client.post("/v1/validate", {"paths": docs, "no_validate": config.no_validate})
    for doc in out["results"]:
        click.echo(json.dumps(doc, sort_keys=True))


@cli.command()
@click.argument("paths_jsonl", type=click.Path())
@click.option("--out", "out_file", type=click.Path(), default=None,
              help="Graph container path (default: alongside the input).")
@common_options
@click.pass_obj
def featurize(client: ServiceClient, paths_jsonl: str, out_file, config_path, seed) -> None:
    """Build the heterogeneous path/opcode graph container from paths."""
    config = _load_config(config_path, seed)
    docs = [json.loads(line) for line in _read_text(paths_jsonl).splitlines() if line.strip()]
    out = client.post("/v1/featurize", {"paths": docs, "window": config.window,
                                        "feature_dim": config.hidden})
    target = Path(out_file) if out_file else Path(paths_jsonl).with_suffix(".graph")
    target.write_bytes(base64.b64decode(out["container_b64"]))
    click.echo(json.dumps({"out": str(target), "n_path": out["n_path"],
                           "n_opcode": out["n_opcode"]}, sort_keys=True))


@cli.command()
@click.option("--manifest", required=True, type=click.Path())
@click.option("--detector", required=True, type=click.Choice(list(DETECTORS)))
@click.option("--out", "out_file", type=click.Path(), default=None,
              help="Checkpoint path (default: <detector>.ckpt).")
@common_options
@click.pass_obj
def train(client: ServiceClient, manifest: str, detector: str, out_file,
          config_path, seed) -> None:
    """Train one detector on a labeled manifest and write its checkpoint."""
    config = _load_config(config_path, seed)
    payloads, errors = _manifest_payloads(manifest, require_labels=True)
    for err in errors:
        click.echo(f"manifest: {err}", err=True)
    if not payloads:
        raise InputError("no usable manifest entries")
    out = client.post("/v1/train", {"protocols": payloads, "detector": detector,
                                    "config": config.echo()})
    for row in out["history"]:
        click.echo(json.dumps(row, sort_keys=True))
    click.echo(json.dumps({"test_metrics": out["test_metrics"],
                           "test_protocols": out["test_protocols"]}, sort_keys=True))
    target = Path(out_file) if out_file else Path(f"{detector}.ckpt")
    target.write_bytes(base64.b64decode(out["checkpoint_b64"]))


@cli.command()
@click.argument("paths_jsonl", type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@common_options
@click.pass_obj
def predict(client: ServiceClient, paths_jsonl: str, checkpoint_path: str,
            config_path, seed) -> None:
    """Classify paths with a trained detector checkpoint."""
    docs = [json.loads(line) for line in _read_text(paths_jsonl).splitlines() if line.strip()]
    try:
        blob = Path(checkpoint_path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {checkpoint_path}: {exc}") from exc
    out = client.post("/v1/predict", {"checkpoint_b64": base64.b64encode(blob).decode(),
                                      "paths": docs})
    for row in out["predictions"]:
        click.echo(json.dumps(row, sort_keys=True))
    click.echo(json.dumps({"detector": out["detector"], "verdict": out["verdict"]},
                          sort_keys=True))


@cli.command()
@click.option("--manifest", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--checkpoint", "checkpoint_args", multiple=True,
              help="detector=path, overrides config checkpoints.")
@click.option("--detector", "only_detectors", multiple=True,
              type=click.Choice(list(DETECTORS)), help="Scan a subset of detectors.")
@click.option("--format", "fmt", type=click.Choice(["json", "text"]), default="json")
@common_options
@click.pass_obj
def scan(client: ServiceClient, manifest: str, out_dir: str, checkpoint_args,
         only_detectors, fmt: str, config_path, seed) -> None:
    """Run the full pipeline over a manifest and write one report per protocol."""
    config = _load_config(config_path, seed)
    checkpoint_paths = dict(config.checkpoints)
    for arg in checkpoint_args:
        if "=" not in arg:
            raise click.UsageError("--checkpoint expects detector=path")
        name, _, path = arg.partition("=")
        checkpoint_paths[name] = path
    if only_detectors:
        checkpoint_paths = {k: v for k, v in checkpoint_paths.items() if k in only_detectors}
    if not checkpoint_paths:
        raise InputError("no checkpoints configured; use --checkpoint or the config file")
    checkpoints = {}
    for name, path in sorted(checkpoint_paths.items()):
        try:
            checkpoints[name] = base64.b64encode(Path(path).read_bytes()).decode()
        except OSError as exc:
            raise InputError(f"cannot read checkpoint {path}: {exc}") from exc

    payloads, errors = _manifest_payloads(manifest, require_labels=False)
    out_base = Path(out_dir)
    out_base.mkdir(parents=True, exist_ok=True)
    index: dict = {"version": __version__, "protocols": [], "errors": sorted(errors)}
    suffix = "json" if fmt == "json" else "txt"
    for payload in payloads:
        out = client.post("/v1/scan", {"protocol": payload, "config": config.echo(),
                                       "checkpoints": checkpoints})
        report = out["report"]
        report_path = out_base / f"{payload['protocol_id']}.{suffix}"
        report_path.write_bytes(emit_report(report, fmt))
        index["protocols"].append({"protocol_id": payload["protocol_id"],
                                   "report": report_path.name,
                                   "verdicts": report["verdicts"]})
    for err in errors:
        click.echo(f"manifest: {err}", err=True)
    (out_base / "index.json").write_bytes(
        (json.dumps(index, sort_keys=True, indent=2) + "\n").encode())
    click.echo(json.dumps({"scanned": len(index["protocols"]),
                           "errors": len(errors), "out": str(out_base)}, sort_keys=True))


@cli.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8351, type=int)
def serve(host: str, port: int) -> None:
    """Run the inspection service."""
    import uvicorn

    uvicorn.run("evmtrail.service.app:app", host=host, port=port)


def main(argv: list[str] | None = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except InputError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
