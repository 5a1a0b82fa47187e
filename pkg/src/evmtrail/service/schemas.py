"""Request/response models for the inspection service.

Structural documents (CFGs, linked graphs, paths, reports) travel as the
same JSON shapes the CLI writes to disk, so clients can pipe them between
endpoints unchanged.
"""

from __future__ import annotations

from typing import Any

from pydantic import BaseModel, Field


class ContractBlob(BaseModel):
    contract_id: str
    code: str  # hex, optional 0x prefix


class DisasmRequest(BaseModel):
    code: str


class DisasmResponse(BaseModel):
    listing: str
    instructions: list[dict[str, Any]]


class CfgRequest(BaseModel):
    contract_id: str = "contract"
    code: str


class CfgResponse(BaseModel):
    cfg: dict[str, Any]


class LinkRequest(BaseModel):
    contracts: list[ContractBlob]
    no_link: bool = False


class LinkResponse(BaseModel):
    linked: dict[str, Any]
    report: dict[str, int]


class BoundsModel(BaseModel):
    max_block_visits: int = 2
    max_path_length: int = 4096
    max_paths_per_entry: int = 64


class PathsRequest(BaseModel):
    linked: dict[str, Any]
    bounds: BoundsModel = Field(default_factory=BoundsModel)
    entries: list[tuple[str, int]] | None = None


class PathsResponse(BaseModel):
    paths: list[dict[str, Any]]


class ValidateRequest(BaseModel):
    paths: list[dict[str, Any]]
    no_validate: bool = False


class ValidateResponse(BaseModel):
    results: list[dict[str, Any]]  # each path document + {feasible, reason, pc}
    survivors: int


class FeaturizeRequest(BaseModel):
    paths: list[dict[str, Any]] | None = None  # path documents with mnemonics
    sequences: list[list[str]] | None = None  # or raw mnemonic sequences
    window: int = 20
    feature_dim: int = 312


class FeaturizeResponse(BaseModel):
    n_path: int
    n_opcode: int
    vocabulary: list[str]
    container_b64: str


class ProtocolPayload(BaseModel):
    protocol_id: str
    contracts: list[ContractBlob]
    label: str | None = None
    chain: str | None = None
    entry_hints: list[tuple[str, str]] | None = None


class TrainRequest(BaseModel):
    protocols: list[ProtocolPayload]
    detector: str
    config: dict[str, Any] = Field(default_factory=dict)


class TrainResponse(BaseModel):
    detector: str
    history: list[dict[str, Any]]
    test_metrics: dict[str, Any]
    train_protocols: list[str]
    test_protocols: list[str]
    checkpoint_b64: str


class PredictRequest(BaseModel):
    checkpoint_b64: str
    paths: list[dict[str, Any]] | None = None
    sequences: list[list[str]] | None = None


class PredictResponse(BaseModel):
    detector: str
    predictions: list[dict[str, Any]]  # {probabilities, y_seq, y_gcn, label}
    verdict: str


class ScanRequest(BaseModel):
    protocol: ProtocolPayload
    config: dict[str, Any] = Field(default_factory=dict)
    checkpoints: dict[str, str]  # detector -> base64 checkpoint container


class ScanResponse(BaseModel):
    report: dict[str, Any]


class HealthResponse(BaseModel):
    status: str
    version: str
