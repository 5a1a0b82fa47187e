"""Shared test machinery: a tiny two-pass assembler, a concrete reference
interpreter (the differential oracle), and fixture factories used across
modules. Everything here is deliberately independent of the library's own
decoding/replay logic wherever it serves as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from evmtrail.cfg import BRANCH_TAKEN, FALLTHROUGH, JUMP, build_cfg
from evmtrail.isa import BY_NAME, Instruction, decode_bytecode
from evmtrail.linking import LinkedCFG, link
from evmtrail.paths import DataPath, PathEdge

WORD = (1 << 256) - 1
DUMMY_WORD = 0x2A  # fixed value returned by env/memory/storage reads


# -- assembler ----------------------------------------------------------------

class Asm:
    """Two-pass assembler: mnemonics plus symbolic jump labels."""

    def __init__(self) -> None:
        self._items: list = []

    def op(self, name: str, operand: int | None = None) -> "Asm":
        spec = BY_NAME[name]
        width = spec.immediate_width
        if width and operand is None:
            operand = 0
        self._items.append(("op", spec, operand))
        return self

    def push(self, value: int, width: int = 1) -> "Asm":
        return self.op(f"PUSH{width}", value)

    def push_label(self, label: str, width: int = 2) -> "Asm":
        self._items.append(("push_label", label, width))
        return self

    def label(self, name: str) -> "Asm":
        self._items.append(("label", name))
        return self

    def raw(self, data: bytes) -> "Asm":
        self._items.append(("raw", data))
        return self

    def assemble(self) -> bytes:
        offsets: dict[str, int] = {}
        pc = 0
        for item in self._items:
            kind = item[0]
            if kind == "label":
                offsets[item[1]] = pc
            elif kind == "op":
                pc += 1 + item[1].immediate_width
            elif kind == "push_label":
                pc += 1 + item[2]
            else:
                pc += len(item[1])
        out = bytearray()
        for item in self._items:
            kind = item[0]
            if kind == "label":
                continue
            if kind == "op":
                _k, spec, operand = item
                out.append(spec.byte_value)
                if spec.immediate_width:
                    out += int(operand).to_bytes(spec.immediate_width, "big")
            elif kind == "push_label":
                _k, label, width = item
                out.append(BY_NAME[f"PUSH{width}"].byte_value)
                out += offsets[label].to_bytes(width, "big")
            else:
                out += item[1]
        return bytes(out)


def assemble(*ops) -> bytes:
    """assemble(("PUSH1", 4), "JUMP", "JUMPDEST", "STOP") -> bytes."""
    asm = Asm()
    for item in ops:
        if isinstance(item, tuple):
            asm.op(item[0], item[1])
        else:
            asm.op(item)
    return asm.assemble()


# -- concrete reference interpreter --------------------------------------------

def _signed(x: int) -> int:
    return x - (1 << 256) if x >> 255 else x


def _unsigned(x: int) -> int:
    return x & WORD


@dataclass
class ExecResult:
    status: str  # stop | return | revert | selfdestruct | end-of-code |
    #              invalid | bad-jump | underflow | overflow | budget
    trace: list[int] = field(default_factory=list)  # executed pcs
    heights: list[int] = field(default_factory=list)  # stack height after each step
    fail_pc: int | None = None

    @property
    def completed(self) -> bool:
        return self.status in ("stop", "return", "revert", "selfdestruct", "end-of-code")


class ConcreteVM:
    """Concrete single-contract stack machine used as the test oracle.

    Arithmetic and stack shuffles are exact; environment, memory, storage and
    hashing reads produce a fixed dummy word; call-family opcodes consume
    their operands and push a dummy success flag.
    """

    def __init__(self, code: bytes, budget: int = 20_000) -> None:
        self.instructions = decode_bytecode(code)
        self.by_pc = {ins.pc: idx for idx, ins in enumerate(self.instructions)}
        self.budget = budget

    def run(self, entry_pc: int = 0) -> ExecResult:
        result = ExecResult("budget")
        stack: list[int] = []
        idx = self.by_pc.get(entry_pc)
        if idx is None:
            result.status = "bad-jump"
            return result
        for _ in range(self.budget):
            if idx >= len(self.instructions):
                result.status = "end-of-code"
                return result
            ins = self.instructions[idx]
            name = ins.mnemonic
            spec = ins.spec
            if len(stack) < spec.pops:
                result.status = "underflow"
                result.fail_pc = ins.pc
                return result
            result.trace.append(ins.pc)

            if name == "JUMP" or name == "JUMPI":
                target = stack.pop()
                taken = True
                if name == "JUMPI":
                    taken = stack.pop() != 0
                result.heights.append(len(stack))
                if taken:
                    t_idx = self.by_pc.get(target)
                    if t_idx is None or not self.instructions[t_idx].spec.is_jumpdest:
                        result.status = "bad-jump"
                        result.fail_pc = ins.pc
                        return result
                    idx = t_idx
                else:
                    idx += 1
                continue

            halted = self._apply(stack, ins, result)
            if len(stack) > 1024:
                result.status = "overflow"
                result.fail_pc = ins.pc
                return result
            result.heights.append(len(stack))
            if halted:
                return result
            idx += 1
        return result

    @staticmethod
    def _apply(stack: list[int], ins: Instruction, result: ExecResult) -> bool:
        name = ins.mnemonic
        spec = ins.spec

        if spec.is_push:
            stack.append(ins.operand_value or 0)
            return False
        if name.startswith("DUP"):
            stack.append(stack[-spec.pops])
            return False
        if name.startswith("SWAP"):
            n = spec.pops - 1
            stack[-1], stack[-(n + 1)] = stack[-(n + 1)], stack[-1]
            return False

        args = [stack.pop() for _ in range(spec.pops)]
        binary = {
            "ADD": lambda a, b: (a + b) & WORD,
            "MUL": lambda a, b: (a * b) & WORD,
            "SUB": lambda a, b: (a - b) & WORD,
            "DIV": lambda a, b: 0 if b == 0 else a // b,
            "MOD": lambda a, b: 0 if b == 0 else a % b,
            "SDIV": lambda a, b: 0 if b == 0 else _unsigned(
                abs(_signed(a)) // abs(_signed(b)) * (1 if (_signed(a) < 0) == (_signed(b) < 0) else -1)),
            "SMOD": lambda a, b: 0 if b == 0 else _unsigned(
                abs(_signed(a)) % abs(_signed(b)) * (1 if _signed(a) >= 0 else -1)),
            "EXP": lambda a, b: pow(a, b, 1 << 256),
            "SIGNEXTEND": lambda a, b: ConcreteVM._signextend(a, b),
            "LT": lambda a, b: int(a < b),
            "GT": lambda a, b: int(a > b),
            "SLT": lambda a, b: int(_signed(a) < _signed(b)),
            "SGT": lambda a, b: int(_signed(a) > _signed(b)),
            "EQ": lambda a, b: int(a == b),
            "AND": lambda a, b: a & b,
            "OR": lambda a, b: a | b,
            "XOR": lambda a, b: a ^ b,
            "BYTE": lambda a, b: (b >> (8 * (31 - a))) & 0xFF if a < 32 else 0,
            "SHL": lambda a, b: (b << a) & WORD if a < 256 else 0,
            "SHR": lambda a, b: b >> a if a < 256 else 0,
            "SAR": lambda a, b: _unsigned(_signed(b) >> a) if a < 256 else (WORD if b >> 255 else 0),
        }
        if name in binary:
            stack.append(binary[name](args[0], args[1]))
        elif name == "ISZERO":
            stack.append(int(args[0] == 0))
        elif name == "NOT":
            stack.append(args[0] ^ WORD)
        elif name in ("ADDMOD", "MULMOD"):
            a, b, n = args
            if n == 0:
                stack.append(0)
            else:
                stack.append((a + b) % n if name == "ADDMOD" else (a * b) % n)
        elif name == "STOP":
            result.status = "stop"
            return True
        elif name == "RETURN":
            result.status = "return"
            return True
        elif name == "REVERT":
            result.status = "revert"
            return True
        elif name == "SELFDESTRUCT":
            result.status = "selfdestruct"
            return True
        elif name == "INVALID":
            result.status = "invalid"
            result.fail_pc = ins.pc
            return True
        else:
            # env, memory, storage, hashing, logging, calls: dummy results
            stack.extend([DUMMY_WORD] * spec.pushes)
        return False

    @staticmethod
    def _signextend(a: int, b: int) -> int:
        if a >= 32:
            return b
        bit = 8 * a + 7
        if b & (1 << bit):
            return b | (WORD ^ ((1 << (bit + 1)) - 1))
        return b & ((1 << (bit + 1)) - 1)


def trace_to_path(contract_id: str, code: bytes, trace: list[int]) -> DataPath:
    """Build a DataPath from an executed pc trace, marking which block
    transitions exist as static CFG edges."""
    cfg = build_cfg(contract_id, code)
    instructions = {ins.pc: ins for block in cfg.blocks for ins in block.instructions}
    block_of = {}
    for block in cfg.blocks:
        for ins in block.instructions:
            block_of[ins.pc] = block
    steps = [(contract_id, instructions[pc]) for pc in trace]
    edges = []
    for k in range(1, len(trace)):
        prev_block = block_of[trace[k - 1]]
        cur_block = block_of[trace[k]]
        if cur_block.id == prev_block.id and trace[k] > trace[k - 1]:
            continue  # same block, straight line
        last = prev_block.last
        if last.mnemonic == "JUMP":
            kind = JUMP
        elif last.mnemonic == "JUMPI":
            kind = BRANCH_TAKEN if trace[k] != last.pc + last.size else FALLTHROUGH
        else:
            kind = FALLTHROUGH
        static = (cur_block.id, kind) in prev_block.successors
        edges.append(PathEdge(kind, k, static))
    return DataPath((contract_id, block_of[trace[0]].id), steps, edges)


# -- canonical multi-contract fixtures -----------------------------------------

CALLER_SELECTOR = 0x11223344
CALLEE_SELECTOR = 0xDEADBEEF


def dispatcher_contract(selector_bodies: list[tuple[int, list]],
                        fallback_ops: list | None = None) -> bytes:
    """solc-style contract: selector dispatch chain plus labeled bodies."""
    asm = Asm()
    asm.push(0).op("CALLDATALOAD")
    for i, (selector, _body) in enumerate(selector_bodies):
        asm.op("DUP1").op("PUSH4", selector).op("EQ").push_label(f"body{i}").op("JUMPI")
    for item in (fallback_ops or [("PUSH1", 0), "DUP1", "REVERT"]):
        if isinstance(item, tuple):
            asm.op(item[0], item[1])
        else:
            asm.op(item)
    for i, (_selector, body) in enumerate(selector_bodies):
        asm.label(f"body{i}").op("JUMPDEST")
        for item in body:
            if isinstance(item, tuple):
                asm.op(item[0], item[1])
            elif isinstance(item, str) and item.startswith("@"):
                asm.push_label(item[1:])
            else:
                asm.op(item)
    return asm.assemble()


def call_body(staged_selector: int, tail: list | None = None) -> list:
    """Function body staging a selector then performing an external call."""
    return [
        ("PUSH4", staged_selector), ("PUSH1", 0), "MSTORE",
        ("PUSH1", 0), ("PUSH1", 0), ("PUSH1", 4), ("PUSH1", 0), ("PUSH1", 0),
        ("PUSH20", 0xAAAA), "GAS", "CALL",
        *(tail or ["POP", "STOP"]),
    ]


def return_body(work: list | None = None) -> list:
    """Callee body: optional work, then RETURN."""
    return [*(work or [("PUSH1", 1), ("PUSH1", 2), "ADD", "POP"]),
            ("PUSH1", 0), ("PUSH1", 0), "RETURN"]


def two_contract_fixture() -> LinkedCFG:
    """Caller stages the callee's selector; exactly one match expected."""
    caller = dispatcher_contract([(CALLER_SELECTOR, call_body(CALLEE_SELECTOR))])
    callee = dispatcher_contract([(CALLEE_SELECTOR, return_body())])
    return link([build_cfg("caller", caller), build_cfg("callee", callee)])


def ambiguous_fixture() -> LinkedCFG:
    """Two callees export the same selector; both get edges."""
    caller = dispatcher_contract([(CALLER_SELECTOR, call_body(CALLEE_SELECTOR))])
    callee = dispatcher_contract([(CALLEE_SELECTOR, return_body())])
    return link([build_cfg("caller", caller), build_cfg("callee_a", callee),
                 build_cfg("callee_b", callee)])


def no_match_fixture() -> LinkedCFG:
    """Caller stages a selector nobody exports."""
    caller = dispatcher_contract([(CALLER_SELECTOR, call_body(0x0BADF00D))])
    callee = dispatcher_contract([(CALLEE_SELECTOR, return_body())])
    return link([build_cfg("caller", caller), build_cfg("callee", callee)])


def reference_block_walks(linked: LinkedCFG, entry, bounds):
    """Naive recursive reference enumeration of bounded block walks with the
    same successor policy as the extractor (matched calls enter the callee,
    returns obey the frame stack). Returns (block walk, truncated) pairs."""
    from evmtrail.cfg import BRANCH_TAKEN as _BT, CALL as _CALL, RETURN as _RET

    out = []

    def successors(node, frames):
        cid, bid = node
        cfg = linked.contract(cid)
        block = cfg.blocks[bid]
        if block.last.mnemonic in ("RETURN", "STOP") and frames:
            return [(dst, _RET) for dst in linked.return_edges_from(node)
                    if dst == frames[-1]]
        calls = linked.call_edges_from(node) if block.last.spec.is_call else []
        if calls:
            return sorted(
                ((dst, _CALL) for dst in calls),
                key=lambda t: (t[0][0], linked.contract(t[0][0]).blocks[t[0][1]].start_pc))
        order = {FALLTHROUGH: 0, _BT: 1, JUMP: 2}
        return sorted(
            (((cid, sid), kind) for sid, kind in block.successors),
            key=lambda t: (order[t[1]], t[0][0],
                           linked.contract(t[0][0]).blocks[t[0][1]].start_pc))

    def walk(node, visits, walk_blocks, frames, n_steps):
        if len(out) >= bounds.max_paths_per_entry:
            return
        cid, bid = node
        block = linked.contract(cid).blocks[bid]
        n_steps += len(block.instructions)
        walk_blocks = walk_blocks + [node]
        if n_steps >= bounds.max_path_length:
            out.append((walk_blocks, True))
            return
        visits = dict(visits)
        visits[node] = visits.get(node, 0) + 1
        eligible = []
        blocked = False
        for target, kind in successors(node, frames):
            if visits.get(target, 0) >= bounds.max_block_visits:
                blocked = True
            else:
                eligible.append((target, kind))
        if not eligible:
            out.append((walk_blocks, blocked))
            return
        for target, kind in eligible:
            if len(out) >= bounds.max_paths_per_entry:
                return
            new_frames = frames
            if kind == _CALL:
                post = None
                for sid, k in block.successors:
                    if k == FALLTHROUGH:
                        post = (cid, sid)
                new_frames = frames + [post]
            elif kind == _RET:
                new_frames = frames[:-1]
            walk(target, visits, walk_blocks, new_frames, n_steps)

    walk(entry, {}, [], [], 0)
    return out


# -- labeled protocol corpora --------------------------------------------------

MALICIOUS_MOTIF = ["CALLER", "SELFBALANCE", "GASPRICE", ("PUSH1", 0), "SLOAD",
                   ("PUSH1", 1), "SSTORE"]
BENIGN_MOTIF = ["MSIZE", "CHAINID", "COINBASE", ("PUSH1", 0), "MLOAD", "POP", "POP"]


def exploit_protocol_files(directory, index: int, malicious: bool) -> dict:
    """One caller+callee protocol; the class signal lives only in the callee
    body, reachable exclusively through the matched cross-contract call.
    Caller bytecodes are mnemonic-identical across classes."""
    import json as _json
    from pathlib import Path

    directory = Path(directory)
    selector = 0x10000000 + index
    motif = MALICIOUS_MOTIF if malicious else BENIGN_MOTIF
    caller = dispatcher_contract([(CALLER_SELECTOR, call_body(selector))])
    callee = dispatcher_contract([(selector, return_body(list(motif) + ["POP"]))])
    pid = f"proto{index:02d}"
    caller_file = f"{pid}_caller.hex"
    callee_file = f"{pid}_callee.hex"
    (directory / caller_file).write_text(caller.hex() + "\n")
    (directory / callee_file).write_text(callee.hex() + "\n")
    return {
        "protocol_id": pid,
        "contract_files": [caller_file, callee_file],
        "label": "access-control" if malicious else "benign",
        "chain": "testnet",
        "entry_hints": [[f"{pid}_caller", f"0x{CALLER_SELECTOR:08x}"]],
    }


def write_exploit_manifest(directory, n_protocols: int = 20) -> str:
    """Alternating benign/malicious protocols plus a JSONL manifest; returns
    the manifest path. Pairs with split seed 1 for a balanced test split."""
    import json as _json
    from pathlib import Path

    entries = [exploit_protocol_files(directory, i, malicious=bool(i % 2))
               for i in range(n_protocols)]
    manifest = Path(directory) / "manifest.jsonl"
    manifest.write_text("".join(_json.dumps(e) + "\n" for e in entries))
    return str(manifest)


SMALL_MODEL_CONFIG = {
    "embed_dim": 16,
    "hidden": 32,
    "ff": 64,
    "heads": 4,
    "layers": 1,
    "gcn_hidden": 16,
    "truncation": 64,
    "batch_size": 4,
    "dropout": 0.1,
    "epochs": 150,
    "min_epochs": 60,
    "stop_at_train_acc": 1.0,
    "window": 10,
    "seed": 1,
}
