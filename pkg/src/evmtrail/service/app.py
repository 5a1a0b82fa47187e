"""FastAPI application exposing every pipeline stage.

The service is stateless: bytecode, paths and checkpoints travel inside the
requests, so any number of workers can serve the same clients. Input
problems surface as HTTP 400 with a human-readable detail string.
"""

from __future__ import annotations

import base64

from fastapi import FastAPI, HTTPException

from .. import InputError, __version__
from ..cfg import build_cfg, cfg_to_dict, instruction_to_dict
from ..containers import ContainerError, bundle_from_bytes, bundle_to_bytes, graph_to_bytes
from ..featgraph import assemble_graph
from ..isa import decode_bytecode, format_listing, parse_hex
from ..linking import link, link_report, linked_from_dict, linked_to_dict
from ..paths import PathBounds, enumerate_protocol_paths, path_from_dict, path_to_dict
from ..pipeline import (
    LoadedProtocol,
    PipelineConfig,
    scan_protocol,
    train_detector,
)
from ..symstack import validate_path
from . import schemas


def _bytes_of(code_hex: str) -> bytes:
    try:
        return parse_hex(code_hex)
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def _protocol_of(payload: schemas.ProtocolPayload) -> LoadedProtocol:
    contracts = [(c.contract_id, _bytes_of(c.code)) for c in payload.contracts]
    return LoadedProtocol(payload.protocol_id, contracts, payload.label,
                          payload.chain, payload.entry_hints)


def _config_of(data: dict) -> PipelineConfig:
    try:
        return PipelineConfig.from_dict(data)
    except (InputError, ValueError) as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


def create_app() -> FastAPI:
    app = FastAPI(title="evmtrail", version=__version__)

    @app.get("/v1/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/v1/disasm", response_model=schemas.DisasmResponse)
    def disasm(req: schemas.DisasmRequest) -> schemas.DisasmResponse:
        instructions = decode_bytecode(_bytes_of(req.code))
        return schemas.DisasmResponse(
            listing=format_listing(instructions),
            instructions=[instruction_to_dict(i) for i in instructions],
        )

    @app.post("/v1/cfg", response_model=schemas.CfgResponse)
    def cfg(req: schemas.CfgRequest) -> schemas.CfgResponse:
        return schemas.CfgResponse(cfg=cfg_to_dict(build_cfg(req.contract_id,
                                                             _bytes_of(req.code))))

    @app.post("/v1/link", response_model=schemas.LinkResponse)
    def link_contracts(req: schemas.LinkRequest) -> schemas.LinkResponse:
        cfgs = [build_cfg(c.contract_id, _bytes_of(c.code)) for c in req.contracts]
        linked = link(cfgs, enabled=not req.no_link)
        return schemas.LinkResponse(linked=linked_to_dict(linked),
                                    report=link_report(linked))

    @app.post("/v1/paths", response_model=schemas.PathsResponse)
    def paths(req: schemas.PathsRequest) -> schemas.PathsResponse:
        try:
            linked = linked_from_dict(req.linked)
        except (KeyError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"bad linked document: {exc}")
        bounds = PathBounds(req.bounds.max_block_visits, req.bounds.max_path_length,
                            req.bounds.max_paths_per_entry)
        entries = [(c, b) for c, b in req.entries] if req.entries else None
        walked = enumerate_protocol_paths(linked, bounds, entries=entries)
        return schemas.PathsResponse(paths=[path_to_dict(p) for p in walked])

    @app.post("/v1/validate", response_model=schemas.ValidateResponse)
    def validate(req: schemas.ValidateRequest) -> schemas.ValidateResponse:
        results = []
        survivors = 0
        for doc in req.paths:
            try:
                path = path_from_dict(doc)
            except (KeyError, ValueError) as exc:
                raise HTTPException(status_code=400, detail=f"bad path document: {exc}")
            if req.no_validate:
                verdict = {"feasible": True, "reason": None, "pc": None}
            else:
                verdict = validate_path(path).to_dict()
                verdict.pop("value", None)
            survivors += int(verdict["feasible"])
            results.append({**doc, **verdict})
        return schemas.ValidateResponse(results=results, survivors=survivors)

    @app.post("/v1/featurize", response_model=schemas.FeaturizeResponse)
    def featurize(req: schemas.FeaturizeRequest) -> schemas.FeaturizeResponse:
        if req.sequences is not None:
            sequences = req.sequences
        elif req.paths is not None:
            sequences = [doc.get("mnemonics", []) for doc in req.paths]
        else:
            raise HTTPException(status_code=400, detail="need paths or sequences")
        if not sequences:
            raise HTTPException(status_code=400, detail="empty path corpus")
        graph = assemble_graph(sequences, window=req.window, d=req.feature_dim)
        return schemas.FeaturizeResponse(
            n_path=graph.n_path,
            n_opcode=graph.n_opcode,
            vocabulary=graph.vocab.mnemonics,
            container_b64=base64.b64encode(graph_to_bytes(graph)).decode(),
        )

    @app.post("/v1/train", response_model=schemas.TrainResponse)
    def train_endpoint(req: schemas.TrainRequest) -> schemas.TrainResponse:
        config = _config_of(req.config)
        protocols = [_protocol_of(p) for p in req.protocols]
        try:
            outcome = train_detector(protocols, req.detector, config)
        except InputError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return schemas.TrainResponse(
            detector=req.detector,
            history=outcome.history,
            test_metrics=outcome.test_metrics,
            train_protocols=outcome.train_protocol_ids,
            test_protocols=outcome.test_protocol_ids,
            checkpoint_b64=base64.b64encode(bundle_to_bytes(outcome.bundle)).decode(),
        )

    @app.post("/v1/predict", response_model=schemas.PredictResponse)
    def predict(req: schemas.PredictRequest) -> schemas.PredictResponse:
        from ..nn.training import protocol_verdict

        try:
            bundle = bundle_from_bytes(base64.b64decode(req.checkpoint_b64))
        except (ContainerError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"bad checkpoint: {exc}")
        if req.sequences is not None:
            sequences = req.sequences
        elif req.paths is not None:
            sequences = [doc.get("mnemonics", []) for doc in req.paths]
        else:
            raise HTTPException(status_code=400, detail="need paths or sequences")
        predictions = bundle.predict(sequences)
        rows = [
            {
                "probabilities": [round(v, 12) for v in p.probs],
                "y_seq": [round(v, 12) for v in p.y_seq],
                "y_gcn": [round(v, 12) for v in p.y_gcn],
                "label": bundle.labels[p.label],
            }
            for p in predictions
        ]
        return schemas.PredictResponse(detector=bundle.detector, predictions=rows,
                                       verdict=protocol_verdict(predictions))

    @app.post("/v1/scan", response_model=schemas.ScanResponse)
    def scan(req: schemas.ScanRequest) -> schemas.ScanResponse:
        config = _config_of(req.config)
        bundles = {}
        for name, blob in req.checkpoints.items():
            try:
                bundles[name] = bundle_from_bytes(base64.b64decode(blob))
            except (ContainerError, ValueError) as exc:
                raise HTTPException(status_code=400,
                                    detail=f"bad checkpoint for {name}: {exc}")
        protocol = _protocol_of(req.protocol)
        try:
            report = scan_protocol(protocol, config, bundles)
        except InputError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return schemas.ScanResponse(report=report)

    return app


app = create_app()
