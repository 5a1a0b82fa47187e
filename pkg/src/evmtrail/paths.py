"""Bounded depth-first enumeration of data paths through a linked CFG.

Paths follow real control transfer: at a matched call site the walk enters
the callee and comes back through a return edge (call-stack discipline), at
an unmatched site it falls through past the call. Loops are bounded by a
per-path visit cap, and enumeration order is deterministic, so raising the
per-entry path cap only appends paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cfg import BRANCH_TAKEN, CALL, FALLTHROUGH, JUMP, RETURN
from .isa import Instruction
from .linking import LinkedCFG, NodeRef
from .cfg import instruction_to_dict, instruction_from_dict

_KIND_ORDER = {FALLTHROUGH: 0, BRANCH_TAKEN: 1, JUMP: 2, CALL: 3, RETURN: 4}


@dataclass
class PathBounds:
    max_block_visits: int = 2
    max_path_length: int = 4096
    max_paths_per_entry: int = 64

    def __post_init__(self) -> None:
        if min(self.max_block_visits, self.max_path_length, self.max_paths_per_entry) < 1:
            raise ValueError("path bounds must all be >= 1")


@dataclass(frozen=True)
class PathEdge:
    """Annotation of one block transition inside a path."""

    kind: str
    step_index: int  # index of the first step after the transition
    static: bool = True  # edge came from static CFG/link analysis
    selector: bytes | None = None  # matched segment selector at call crossings
    staged: bool = False  # call site staged a selector


@dataclass
class DataPath:
    entry: NodeRef
    steps: list[tuple[str, Instruction]]
    edges: list[PathEdge] = field(default_factory=list)
    truncated: bool = False

    @property
    def crossings(self) -> list[tuple[int, str]]:
        return [(e.step_index, e.kind) for e in self.edges if e.kind in (CALL, RETURN)]

    @property
    def mnemonics(self) -> list[str]:
        return [ins.mnemonic for _cid, ins in self.steps]


@dataclass
class _Frame:
    call_node: NodeRef
    post_call: NodeRef | None


def _successors(linked: LinkedCFG, node: NodeRef,
                frames: list[_Frame]) -> list[tuple[NodeRef, str, bytes | None, bool]]:
    """Eligible successors of `node` as (target, kind, selector, staged)."""
    cid, bid = node
    cfg = linked.contract(cid)
    block = cfg.blocks[bid]
    last = block.last

    if last.mnemonic in ("RETURN", "STOP") and frames:
        expected = frames[-1].post_call
        for dst in linked.return_edges_from(node):
            if dst == expected:
                return [(dst, RETURN, None, False)]
        return []

    call_targets = linked.call_edges_from(node) if last.spec.is_call else []
    if call_targets:
        site = linked.site_at(node)
        staged = site is not None and site.staged_selector is not None
        out = []
        for dst in call_targets:
            selector = None
            callee = linked.contract(dst[0])
            for seg in callee.functions:
                if seg.entry_block == dst[1] and seg.selector is not None:
                    selector = seg.selector
                    break
            out.append((dst, CALL, selector, staged))
        out.sort(key=lambda t: (t[0][0], callee_pc(linked, t[0])))
        return out

    out = [((cid, sid), kind, None, False) for sid, kind in block.successors]
    out.sort(key=lambda t: (_KIND_ORDER[t[1]], t[0][0], callee_pc(linked, t[0])))
    return out


def callee_pc(linked: LinkedCFG, node: NodeRef) -> int:
    return linked.contract(node[0]).blocks[node[1]].start_pc


def enumerate_paths(linked: LinkedCFG, entry: NodeRef,
                    bounds: PathBounds | None = None) -> list[DataPath]:
    """All bounded DFS walks from `entry`, in deterministic order."""
    bounds = bounds or PathBounds()
    emitted: list[DataPath] = []

    steps: list[tuple[str, Instruction]] = []
    edges: list[PathEdge] = []
    visits: dict[NodeRef, int] = {}
    frames: list[_Frame] = []

    def block_instructions(node: NodeRef) -> list[Instruction]:
        return linked.contract(node[0]).blocks[node[1]].instructions

    # Each stack record: node, remaining successor candidates, bookkeeping to
    # undo on backtrack (steps appended, frame pushed/popped, length hit).
    @dataclass
    class _Rec:
        node: NodeRef
        cands: list[tuple[NodeRef, str, bytes | None, bool]]
        next_cand: int
        n_appended: int
        length_hit: bool
        bound_blocked: bool
        pushed_frame: bool
        popped_frame: _Frame | None

    def enter(node: NodeRef, via: tuple[str, bytes | None, bool] | None) -> _Rec:
        pushed = False
        popped = None
        if via is not None:
            kind, selector, staged = via
            edges.append(PathEdge(kind, len(steps), True, selector, staged))
            if kind == CALL:
                cid, bid = rec_stack[-1].node
                post = None
                for sid, k in linked.contract(cid).blocks[bid].successors:
                    if k == FALLTHROUGH:
                        post = (cid, sid)
                        break
                frames.append(_Frame(rec_stack[-1].node, post))
                pushed = True
            elif kind == RETURN:
                popped = frames.pop()
        visits[node] = visits.get(node, 0) + 1
        ins = block_instructions(node)
        room = bounds.max_path_length - len(steps)
        take = ins[:room] if len(ins) > room else ins
        for i in take:
            steps.append((node[0], i))
        length_hit = len(steps) >= bounds.max_path_length
        if length_hit:
            cands: list = []
            blocked = False
        else:
            cands = _successors(linked, node, frames)
            blocked = False
            filtered = []
            for cand in cands:
                if visits.get(cand[0], 0) >= bounds.max_block_visits:
                    blocked = True
                else:
                    filtered.append(cand)
            cands = filtered
        return _Rec(node, cands, 0, len(take), length_hit, blocked, pushed, popped)

    def leave(rec: _Rec) -> None:
        del steps[len(steps) - rec.n_appended:]
        visits[rec.node] -= 1
        if rec.pushed_frame:
            frames.pop()
        if rec.popped_frame is not None:
            frames.append(rec.popped_frame)

    rec_stack: list[_Rec] = []
    rec_stack.append(enter(entry, None))
    while rec_stack:
        if len(emitted) >= bounds.max_paths_per_entry:
            break
        top = rec_stack[-1]
        if top.next_cand == 0 and not top.cands:
            truncated = top.length_hit or top.bound_blocked
            emitted.append(DataPath(entry, list(steps), list(edges), truncated))
            leave(rec_stack.pop())
            if rec_stack:
                edges.pop()
            continue
        if top.next_cand < len(top.cands):
            target, kind, selector, staged = top.cands[top.next_cand]
            top.next_cand += 1
            rec_stack.append(enter(target, (kind, selector, staged)))
        else:
            leave(rec_stack.pop())
            if rec_stack:
                edges.pop()
    return emitted


def entries_for_protocol(linked: LinkedCFG) -> list[NodeRef]:
    """Entry blocks of every function segment (selector, fallback or sole),
    deduplicated in deterministic contract/segment order."""
    seen: set[NodeRef] = set()
    out: list[NodeRef] = []
    for cfg in linked.contracts:
        for seg in cfg.functions:
            node = (cfg.contract_id, seg.entry_block)
            if node not in seen:
                seen.add(node)
                out.append(node)
    return out


def enumerate_protocol_paths(linked: LinkedCFG, bounds: PathBounds | None = None,
                             entries: list[NodeRef] | None = None) -> list[DataPath]:
    todo = entries if entries is not None else entries_for_protocol(linked)
    out: list[DataPath] = []
    for entry in todo:
        out.extend(enumerate_paths(linked, entry, bounds))
    return out


# -- JSON round-trip ---------------------------------------------------------

def path_to_dict(path: DataPath) -> dict:
    return {
        "entry": [path.entry[0], path.entry[1]],
        "mnemonics": path.mnemonics,
        "steps": [{"contract": cid, **instruction_to_dict(ins)} for cid, ins in path.steps],
        "edges": [
            {
                "kind": e.kind,
                "step_index": e.step_index,
                "static": e.static,
                "selector": "0x" + e.selector.hex() if e.selector is not None else None,
                "staged": e.staged,
            }
            for e in path.edges
        ],
        "crossings": [[i, k] for i, k in path.crossings],
        "truncated": path.truncated,
    }


def path_from_dict(d: dict) -> DataPath:
    steps = [(sd["contract"], instruction_from_dict(sd)) for sd in d["steps"]]
    edges = [
        PathEdge(ed["kind"], ed["step_index"], ed.get("static", True),
                 bytes.fromhex(ed["selector"][2:]) if ed.get("selector") else None,
                 ed.get("staged", False))
        for ed in d.get("edges", [])
    ]
    return DataPath((d["entry"][0], d["entry"][1]), steps, edges, d.get("truncated", False))
