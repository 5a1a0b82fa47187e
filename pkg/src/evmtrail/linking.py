"""Cross-contract linking: match the 4-byte selector staged at each call site
against callee function entries and insert call/return edge pairs.

The staged selector is found by a bounded backward scan: inside the call
block first, then along a unique-predecessor chain up to three blocks deep,
stopping at any intervening call. This mirrors how compilers stage
`encodeWithSelector`-style calldata while keeping linking linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cfg import FALLTHROUGH, ContractCFG, cfg_to_dict, cfg_from_dict
from .isa import selector_hex

UNRESOLVED = "unresolved"
MATCHED = "matched"
EXTERNAL_UNKNOWN = "external-unknown"

_PREDECESSOR_SCAN_DEPTH = 3

NodeRef = tuple[str, int]  # (contract_id, block id)


@dataclass
class CallSite:
    caller_contract: str
    call_block: int
    call_opcode: str
    staged_selector: bytes | None
    resolution: str = UNRESOLVED
    matches: list[tuple[str, int]] = field(default_factory=list)  # (contract_id, function index)
    ambiguous: bool = False


@dataclass
class LinkedCFG:
    contracts: list[ContractCFG]
    call_edges: list[tuple[NodeRef, NodeRef]] = field(default_factory=list)
    return_edges: list[tuple[NodeRef, NodeRef]] = field(default_factory=list)
    call_sites: list[CallSite] = field(default_factory=list)

    def contract(self, contract_id: str) -> ContractCFG:
        return self._by_id()[contract_id]

    def _by_id(self) -> dict[str, ContractCFG]:
        cached = getattr(self, "_idx", None)
        if cached is None:
            cached = {c.contract_id: c for c in self.contracts}
            object.__setattr__(self, "_idx", cached)
        return cached

    def call_edges_from(self, node: NodeRef) -> list[NodeRef]:
        return [dst for src, dst in self.call_edges if src == node]

    def return_edges_from(self, node: NodeRef) -> list[NodeRef]:
        return [dst for src, dst in self.return_edges if src == node]

    def site_at(self, node: NodeRef) -> CallSite | None:
        for site in self.call_sites:
            if (site.caller_contract, site.call_block) == node:
                return site
        return None


def _scan_block_backward(cfg: ContractCFG, block_id: int, start_index: int) -> bytes | None:
    """Most recent PUSH4 at or before start_index, stopping at any call.

    A PUSH4 feeding an EQ is a dispatcher comparison, not calldata staging,
    and never counts.
    """
    ins = cfg.blocks[block_id].instructions
    for k in range(start_index, -1, -1):
        if ins[k].spec.is_call:
            return None
        if ins[k].mnemonic == "PUSH4":
            if k + 1 < len(ins) and ins[k + 1].mnemonic == "EQ":
                continue
            return ins[k].operand
    return None


def find_call_sites(cfg: ContractCFG) -> list[CallSite]:
    """One CallSite per call-family block terminator, selector staged if found."""
    preds = cfg.predecessors()
    sites: list[CallSite] = []
    for block in cfg.blocks:
        if not block.last.spec.is_call:
            continue
        staged = _scan_block_backward(cfg, block.id, len(block.instructions) - 2)
        if staged is None:
            cur = block.id
            for _ in range(_PREDECESSOR_SCAN_DEPTH):
                ps = preds[cur]
                if len(ps) != 1:
                    break
                cur = ps[0]
                staged = _scan_block_backward(cfg, cur, len(cfg.blocks[cur].instructions) - 1)
                if staged is not None:
                    break
        sites.append(CallSite(cfg.contract_id, block.id, block.last.mnemonic, staged))
    return sites


def _exit_blocks(cfg: ContractCFG, member_blocks: set[int]) -> list[int]:
    """Member blocks terminating in RETURN or STOP, in block order."""
    out = []
    for bid in sorted(member_blocks):
        if cfg.blocks[bid].last.mnemonic in ("RETURN", "STOP"):
            out.append(bid)
    return out


def link(cfgs: list[ContractCFG], enabled: bool = True) -> LinkedCFG:
    """Connect per-contract CFGs through selector-matched call/return edges.

    With `enabled` false (the no-connection ablation) the result is the
    disjoint union of the inputs: sites are found but left unresolved and no
    cross edges are inserted. Intra-contract edges are never touched.
    """
    ordered = sorted(cfgs, key=lambda c: c.contract_id)
    linked = LinkedCFG(ordered)

    selector_index: dict[bytes, list[tuple[str, int]]] = {}
    for cfg in ordered:
        for fi, seg in enumerate(cfg.functions):
            if seg.selector is not None:
                selector_index.setdefault(seg.selector, []).append((cfg.contract_id, fi))

    for cfg in ordered:
        sites = sorted(find_call_sites(cfg), key=lambda s: cfg.blocks[s.call_block].start_pc)
        for site in sites:
            linked.call_sites.append(site)
            if not enabled:
                continue
            if site.staged_selector is None:
                site.resolution = EXTERNAL_UNKNOWN
                continue
            matches = [(cid, fi) for cid, fi in selector_index.get(site.staged_selector, [])
                       if cid != cfg.contract_id]
            if not matches:
                site.resolution = EXTERNAL_UNKNOWN
                continue
            site.resolution = MATCHED
            site.matches = matches
            site.ambiguous = len(matches) > 1
            call_block = cfg.blocks[site.call_block]
            post_call = [succ for succ, kind in call_block.successors if kind == FALLTHROUGH]
            caller_node: NodeRef = (cfg.contract_id, site.call_block)
            for cid, fi in matches:
                callee = linked.contract(cid)
                seg = callee.functions[fi]
                linked.call_edges.append((caller_node, (cid, seg.entry_block)))
                if post_call:
                    for exit_bid in _exit_blocks(callee, seg.member_blocks):
                        linked.return_edges.append(((cid, exit_bid),
                                                    (cfg.contract_id, post_call[0])))
    return linked


def link_report(linked: LinkedCFG) -> dict:
    """Deterministic counts of call sites by resolution class."""
    report = {"matched": 0, "ambiguous": 0, "unknown": 0, "unresolved": 0,
              "call_edges": len(linked.call_edges), "return_edges": len(linked.return_edges)}
    for site in linked.call_sites:
        if site.ambiguous:
            report["ambiguous"] += 1
        elif site.resolution == MATCHED:
            report["matched"] += 1
        elif site.resolution == EXTERNAL_UNKNOWN:
            report["unknown"] += 1
        else:
            report["unresolved"] += 1
    return report


# -- JSON round-trip ---------------------------------------------------------

def linked_to_dict(linked: LinkedCFG) -> dict:
    return {
        "contracts": [cfg_to_dict(c) for c in linked.contracts],
        "call_edges": [[list(src), list(dst)] for src, dst in linked.call_edges],
        "return_edges": [[list(src), list(dst)] for src, dst in linked.return_edges],
        "call_sites": [
            {
                "caller_contract": s.caller_contract,
                "call_block": s.call_block,
                "call_opcode": s.call_opcode,
                "staged_selector": selector_hex(s.staged_selector)
                if s.staged_selector is not None else None,
                "resolution": s.resolution,
                "matches": [list(m) for m in s.matches],
                "ambiguous": s.ambiguous,
            }
            for s in linked.call_sites
        ],
    }


def linked_from_dict(d: dict) -> LinkedCFG:
    linked = LinkedCFG([cfg_from_dict(cd) for cd in d["contracts"]])
    linked.call_edges = [((s[0], s[1]), (t[0], t[1])) for s, t in d["call_edges"]]
    linked.return_edges = [((s[0], s[1]), (t[0], t[1])) for s, t in d["return_edges"]]
    for sd in d["call_sites"]:
        sel = bytes.fromhex(sd["staged_selector"][2:]) if sd["staged_selector"] else None
        site = CallSite(sd["caller_contract"], sd["call_block"], sd["call_opcode"], sel,
                        sd["resolution"], [(m[0], m[1]) for m in sd["matches"]],
                        sd["ambiguous"])
        linked.call_sites.append(site)
    return linked
