"""Symbolic-stack replay of data paths.

The stack carries concrete 256-bit words where they are derivable (PUSH
immediates, AND of concretes) and fresh placeholder symbols for every other
computed result. Replay enforces stack-height discipline, jump-target
consistency and selector consistency at matched call crossings; the first
violation decides the verdict.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .cfg import BRANCH_TAKEN, CALL, JUMP, RETURN
from .isa import Instruction, STACK_LIMIT
from .paths import DataPath

WORD_MASK = (1 << 256) - 1

UNDERFLOW = "underflow"
OVERFLOW = "overflow"
BAD_JUMP_TARGET = "bad-jump-target"
JUMP_TARGET_SYMBOLIC = "jump-target-symbolic"
SELECTOR_MISMATCH = "selector-mismatch"


@dataclass(frozen=True)
class Concrete:
    value: int


@dataclass(frozen=True)
class Symbol:
    id: int


SymValue = Concrete | Symbol


class SymStack:
    """Ordered symbolic stack, top = last item."""

    __slots__ = ("items",)

    def __init__(self, items: list[SymValue] | None = None) -> None:
        self.items: list[SymValue] = items if items is not None else []

    @property
    def height(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class Verdict:
    feasible: bool
    reason: str | None = None
    pc: int | None = None
    value: int | None = None

    def to_dict(self) -> dict:
        return {"feasible": self.feasible, "reason": self.reason,
                "pc": self.pc, "value": self.value}


class _Violation(Exception):
    def __init__(self, reason: str, pc: int, value: int | None = None) -> None:
        super().__init__(reason)
        self.verdict = Verdict(False, reason, pc, value)


def _pop(stack: SymStack, n: int, pc: int) -> list[SymValue]:
    if stack.height < n:
        raise _Violation(UNDERFLOW, pc)
    out = [stack.items.pop() for _ in range(n)]
    return out  # top first


def _push(stack: SymStack, values: list[SymValue], pc: int) -> None:
    if stack.height + len(values) > STACK_LIMIT:
        raise _Violation(OVERFLOW, pc)
    stack.items.extend(values)


def step(stack: SymStack, ins: Instruction, fresh=None) -> SymStack:
    """Apply one instruction's transfer function to the stack in place.

    PUSH/DUP/SWAP/POP move values, AND of two concretes stays concrete, and
    every other opcode consumes its operands and produces placeholder
    symbols. Raises on stack underflow/overflow.
    """
    if fresh is None:
        counter = itertools.count()
        fresh = lambda: Symbol(next(counter))  # noqa: E731
    name = ins.mnemonic
    spec = ins.spec
    pc = ins.pc
    if spec.is_push:
        _push(stack, [Concrete(ins.operand_value or 0)], pc)
    elif name.startswith("DUP"):
        n = spec.pops
        if stack.height < n:
            raise _Violation(UNDERFLOW, pc)
        _push(stack, [stack.items[-n]], pc)
    elif name.startswith("SWAP"):
        n = spec.pops - 1
        if stack.height < n + 1:
            raise _Violation(UNDERFLOW, pc)
        items = stack.items
        items[-1], items[-(n + 1)] = items[-(n + 1)], items[-1]
    elif name == "POP":
        _pop(stack, 1, pc)
    elif name == "AND":
        a, b = _pop(stack, 2, pc)
        if isinstance(a, Concrete) and isinstance(b, Concrete):
            _push(stack, [Concrete(a.value & b.value)], pc)
        else:
            _push(stack, [fresh()], pc)
    else:
        _pop(stack, spec.pops, pc)
        _push(stack, [fresh() for _ in range(spec.pushes)], pc)
    return stack


@dataclass
class _CallerState:
    stack: SymStack
    last_push4: int | None


def _observed_selector(stack: SymStack, last_push4: int | None) -> int | None:
    if last_push4 is not None:
        return last_push4
    for value in reversed(stack.items):
        if isinstance(value, Concrete) and 0 < value.value < (1 << 32):
            return value.value
    return None


def replay_path(path: DataPath) -> tuple[Verdict, list[int]]:
    """Replay a path through the symbolic stack.

    Returns the verdict plus the stack height after every step (the height
    of the frame the step executed in).
    """
    counter = itertools.count()
    fresh = lambda: Symbol(next(counter))  # noqa: E731

    edge_at = {e.step_index: e for e in path.edges}
    stack = SymStack()
    frames: list[_CallerState] = []
    last_push4: int | None = None
    heights: list[int] = []
    steps = path.steps

    try:
        for k, (_cid, ins) in enumerate(steps):
            name = ins.mnemonic
            pc = ins.pc
            edge_next = edge_at.get(k + 1)

            if name == "JUMP" or name == "JUMPI":
                popped = _pop(stack, ins.spec.pops, pc)
                target = popped[0]
                taken = edge_next is not None and edge_next.kind in (JUMP, BRANCH_TAKEN)
                if taken:
                    nxt = steps[k + 1][1]
                    if isinstance(target, Concrete):
                        if target.value != nxt.pc or not nxt.spec.is_jumpdest:
                            raise _Violation(BAD_JUMP_TARGET, pc, target.value)
                    elif not edge_next.static:
                        raise _Violation(JUMP_TARGET_SYMBOLIC, pc)
            elif ins.spec.is_call and edge_next is not None and edge_next.kind == CALL:
                if edge_next.staged and edge_next.selector is not None:
                    seen = _observed_selector(stack, last_push4)
                    want = int.from_bytes(edge_next.selector, "big")
                    if seen is not None and seen != want:
                        raise _Violation(SELECTOR_MISMATCH, pc, seen)
                _pop(stack, ins.spec.pops, pc)
                _push(stack, [fresh() for _ in range(ins.spec.pushes)], pc)
                frames.append(_CallerState(stack, last_push4))
                heights.append(stack.height)
                stack = SymStack()
                last_push4 = None
                continue
            elif name in ("RETURN", "STOP") and edge_next is not None and edge_next.kind == RETURN:
                _pop(stack, ins.spec.pops, pc)
                heights.append(stack.height)
                caller = frames.pop()
                stack = caller.stack
                last_push4 = caller.last_push4
                continue
            else:
                step(stack, ins, fresh)
                if name == "PUSH4":
                    last_push4 = ins.operand_value
            heights.append(stack.height)
    except _Violation as violation:
        return violation.verdict, heights
    return Verdict(True), heights


def validate_path(path: DataPath) -> Verdict:
    verdict, _heights = replay_path(path)
    return verdict


def filter_feasible(paths: list[DataPath], bypass: bool = False,
                    ) -> tuple[list[DataPath], list[tuple[DataPath, Verdict]]]:
    """Split paths into feasible survivors and rejections with reasons.

    With `bypass` (the no-validation ablation) the filter is skipped
    entirely and every path survives.
    """
    if bypass:
        return list(paths), []
    survivors: list[DataPath] = []
    rejected: list[tuple[DataPath, Verdict]] = []
    for path in paths:
        verdict = validate_path(path)
        if verdict.feasible:
            survivors.append(path)
        else:
            rejected.append((path, verdict))
    return survivors, rejected
