"""Per-contract control-flow recovery: basic blocks, static jump edges and
selector-keyed function segmentation.

Jump resolution is deliberately shallow: only a PUSH immediately before the
JUMP/JUMPI in the same block is folded. Anything else lands in
`unresolved_jumps`; dynamic precision is recovered later during symbolic
path replay.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .isa import Instruction, decode_bytecode, selector_hex, BY_NAME

# Edge kinds on block successors.
FALLTHROUGH = "fallthrough"
JUMP = "jump"
BRANCH_TAKEN = "branch-taken"
CALL = "call"
RETURN = "return"
CROSS_CONTRACT = "cross-contract"

EDGE_KINDS = (FALLTHROUGH, JUMP, BRANCH_TAKEN, CALL, RETURN, CROSS_CONTRACT)

# Blocks a dispatcher scan will cross before giving up.
_DISPATCH_SCAN_LIMIT = 512
_PROLOGUE_HOP_LIMIT = 8


@dataclass
class BasicBlock:
    id: int
    start_pc: int
    end_pc: int
    instructions: list[Instruction]
    successors: list[tuple[int, str]] = field(default_factory=list)

    @property
    def last(self) -> Instruction:
        return self.instructions[-1]

    @property
    def starts_with_jumpdest(self) -> bool:
        return self.instructions[0].spec.is_jumpdest


@dataclass
class FunctionSegment:
    selector: bytes | None
    entry_block: int
    member_blocks: set[int]
    is_fallback: bool = False


@dataclass
class ContractCFG:
    contract_id: str
    blocks: list[BasicBlock]
    functions: list[FunctionSegment] = field(default_factory=list)
    unresolved_jumps: list[int] = field(default_factory=list)

    def block_at_pc(self, pc: int) -> BasicBlock | None:
        idx = self._pc_index().get(pc)
        return self.blocks[idx] if idx is not None else None

    def _pc_index(self) -> dict[int, int]:
        cached = getattr(self, "_pc_idx", None)
        if cached is None:
            cached = {b.start_pc: b.id for b in self.blocks}
            object.__setattr__(self, "_pc_idx", cached)
        return cached

    def predecessors(self) -> dict[int, list[int]]:
        preds: dict[int, list[int]] = {b.id: [] for b in self.blocks}
        for b in self.blocks:
            for succ, _kind in b.successors:
                preds[succ].append(b.id)
        return preds


def _ends_block(ins: Instruction) -> bool:
    spec = ins.spec
    return spec.is_terminator or spec.is_call or spec.mnemonic == "JUMPI"


def build_blocks(instructions: list[Instruction]) -> list[BasicBlock]:
    """Split an instruction stream into basic blocks with static fallthrough edges.

    Leaders: offset 0, every JUMPDEST, and the instruction after a
    terminator, JUMPI or call-family opcode. Call-family and JUMPI blocks get
    a fallthrough successor (the post-call / branch-not-taken segment).
    """
    if not instructions:
        return []
    leaders = {0}
    for k, ins in enumerate(instructions):
        if ins.spec.is_jumpdest:
            leaders.add(k)
        if _ends_block(ins) and k + 1 < len(instructions):
            leaders.add(k + 1)

    order = sorted(leaders)
    blocks: list[BasicBlock] = []
    for bid, start in enumerate(order):
        end = order[bid + 1] if bid + 1 < len(order) else len(instructions)
        chunk = instructions[start:end]
        blocks.append(BasicBlock(bid, chunk[0].pc, chunk[-1].pc, chunk))

    for b in blocks:
        if b.id + 1 >= len(blocks):
            continue
        last = b.last.spec
        if last.is_terminator:
            continue
        # JUMPI, call-family, and blocks split by a following JUMPDEST all
        # fall through to the next block.
        b.successors.append((b.id + 1, FALLTHROUGH))
    return blocks


def resolve_jumps(blocks: list[BasicBlock]) -> list[int]:
    """Fold single-block PUSH-before-JUMP constants into jump edges.

    Returns the ids of blocks whose JUMP/JUMPI target stays unresolved
    (non-constant target, or a target that is not a JUMPDEST).
    """
    by_pc = {b.start_pc: b for b in blocks}
    unresolved: list[int] = []
    for b in blocks:
        last = b.last
        if last.mnemonic not in ("JUMP", "JUMPI"):
            continue
        target_block = None
        if len(b.instructions) >= 2:
            prev = b.instructions[-2]
            if prev.spec.is_push:
                value = prev.operand_value if prev.operand_value is not None else 0
                cand = by_pc.get(value)
                if cand is not None and cand.starts_with_jumpdest:
                    target_block = cand
        if target_block is None:
            unresolved.append(b.id)
            continue
        kind = BRANCH_TAKEN if last.mnemonic == "JUMPI" else JUMP
        b.successors.append((target_block.id, kind))
    return unresolved


def _match_selector_compare(block: BasicBlock) -> tuple[bytes, int] | None:
    """Recognize a dispatcher compare block ending `... PUSH4 sel [DUPn] EQ
    PUSHn dst JUMPI`; returns (selector, body block id).

    Anchors on the block's final EQ with a PUSH4 at most two instructions
    before it, which covers both compare shapes compilers emit (`DUP1 PUSH4
    EQ` and `PUSH4 DUP2 EQ`) while skipping selector-extraction masks.
    """
    taken = _static_branch(block)
    if taken is None:
        return None
    return _push4_compare(block, ("EQ",), taken)


def _match_selector_split(block: BasicBlock) -> tuple[bytes, int] | None:
    """Recognize a dispatch-tree pivot block: `PUSH4 pivot [DUPn] GT|LT ...
    JUMPI`. Large dispatchers binary-search the selector before the EQ runs."""
    taken = _static_branch(block)
    if taken is None:
        return None
    return _push4_compare(block, ("GT", "LT"), taken)


def _static_branch(block: BasicBlock) -> int | None:
    if block.last.mnemonic != "JUMPI":
        return None
    for succ, kind in block.successors:
        if kind == BRANCH_TAKEN:
            return succ
    return None


def _push4_compare(block: BasicBlock, compare_ops: tuple[str, ...],
                   taken: int) -> tuple[bytes, int] | None:
    ins = block.instructions
    for k in range(len(ins) - 1, 0, -1):
        if ins[k].mnemonic not in compare_ops:
            continue
        for back in (1, 2):
            if k - back >= 0 and ins[k - back].mnemonic == "PUSH4":
                return ins[k - back].operand, taken
        return None
    return None


def _forward_closure(blocks: list[BasicBlock], entry: int) -> set[int]:
    seen = {entry}
    stack = [entry]
    while stack:
        bid = stack.pop()
        for succ, _kind in blocks[bid].successors:
            if succ not in seen:
                seen.add(succ)
                stack.append(succ)
    return seen


def segment_functions(cfg: ContractCFG) -> list[FunctionSegment]:
    """Recover ABI-exposed function segments from the dispatcher.

    Compilers lay the dispatcher out first, so its head is the first
    selector-compare or pivot-split block in layout order (guards like the
    calldatasize check precede it). The walk covers both shapes: linear
    compare chains and binary-search trees whose pivot blocks branch into
    sub-chains. Each selector compare yields a segment rooted at its jump
    target; the first non-dispatcher block reached becomes the fallback
    segment. A contract with no dispatcher pattern yields one selectorless
    segment rooted at pc 0.
    """
    blocks = cfg.blocks
    if not blocks:
        return []
    head: BasicBlock | None = None
    for block in blocks[:_PROLOGUE_HOP_LIMIT]:
        if _match_selector_compare(block) or _match_selector_split(block):
            head = block
            break
    if head is None:
        return [FunctionSegment(None, blocks[0].id, _forward_closure(blocks, blocks[0].id))]

    segments: list[FunctionSegment] = []
    fallback_entry: int | None = None
    visited: set[int] = set()
    todo = [head.id]
    while todo and len(visited) < _DISPATCH_SCAN_LIMIT:
        bid = todo.pop()
        if bid in visited:
            continue
        visited.add(bid)
        block = blocks[bid]
        compare = _match_selector_compare(block)
        if compare is not None:
            selector, body = compare
            segments.append(FunctionSegment(selector, body, _forward_closure(blocks, body)))
            todo.extend(succ for succ, kind in block.successors if kind == FALLTHROUGH)
            continue
        split = _match_selector_split(block)
        if split is not None:
            # explore the not-taken sub-chain first so leaf order follows pc
            todo.append(split[1])
            todo.extend(succ for succ, kind in block.successors if kind == FALLTHROUGH)
            continue
        if fallback_entry is None and bid != head.id:
            fallback_entry = bid

    if fallback_entry is not None:
        segments.append(FunctionSegment(None, fallback_entry,
                                        _forward_closure(blocks, fallback_entry),
                                        is_fallback=True))
    return segments


def build_cfg(contract_id: str, code: bytes) -> ContractCFG:
    """Decode, block, resolve and segment one contract's runtime bytecode."""
    instructions = decode_bytecode(code)
    blocks = build_blocks(instructions)
    unresolved = resolve_jumps(blocks)
    cfg = ContractCFG(contract_id, blocks, [], unresolved)
    cfg.functions = segment_functions(cfg)
    return cfg


# -- JSON round-trip ---------------------------------------------------------

def instruction_to_dict(ins: Instruction) -> dict:
    d: dict = {"pc": ins.pc, "op": ins.mnemonic}
    if ins.spec.immediate_width > 0:
        d["operand"] = "0x" + ins.operand.hex()
    if ins.truncated:
        d["truncated"] = True
    return d


def instruction_from_dict(d: dict) -> Instruction:
    spec = BY_NAME[d["op"]]
    operand = bytes.fromhex(d.get("operand", "0x")[2:]) if spec.immediate_width else b""
    return Instruction(d["pc"], spec, operand, bool(d.get("truncated", False)))


def cfg_to_dict(cfg: ContractCFG) -> dict:
    return {
        "contract_id": cfg.contract_id,
        "blocks": [
            {
                "id": b.id,
                "start_pc": b.start_pc,
                "end_pc": b.end_pc,
                "instructions": [instruction_to_dict(i) for i in b.instructions],
                "successors": [[succ, kind] for succ, kind in b.successors],
            }
            for b in cfg.blocks
        ],
        "functions": [
            {
                "selector": selector_hex(f.selector) if f.selector is not None else None,
                "entry_block": f.entry_block,
                "member_blocks": sorted(f.member_blocks),
                "is_fallback": f.is_fallback,
            }
            for f in cfg.functions
        ],
        "unresolved_jumps": list(cfg.unresolved_jumps),
    }


def cfg_from_dict(d: dict) -> ContractCFG:
    blocks = []
    for bd in d["blocks"]:
        ins = [instruction_from_dict(i) for i in bd["instructions"]]
        block = BasicBlock(bd["id"], bd["start_pc"], bd["end_pc"], ins,
                           [(s, k) for s, k in bd["successors"]])
        blocks.append(block)
    functions = [
        FunctionSegment(
            bytes.fromhex(fd["selector"][2:]) if fd["selector"] else None,
            fd["entry_block"],
            set(fd["member_blocks"]),
            fd["is_fallback"],
        )
        for fd in d["functions"]
    ]
    return ContractCFG(d["contract_id"], blocks, functions, list(d["unresolved_jumps"]))
