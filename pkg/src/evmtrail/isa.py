"""EVM instruction-set tables and a total, deterministic bytecode disassembler.

The opcode table is the Shanghai-era set (PUSH0 included). Every byte value
that is not a defined opcode decodes to an INVALID terminator, so decoding
never fails: data sections, metadata trailers and garbage all come out as
positional instruction streams.
"""

from __future__ import annotations

from dataclasses import dataclass

STACK_LIMIT = 1024


@dataclass(frozen=True)
class OpcodeSpec:
    """Static description of one opcode: encoding, arity and control role."""

    byte_value: int
    mnemonic: str
    immediate_width: int = 0
    pops: int = 0
    pushes: int = 0
    is_terminator: bool = False
    is_call: bool = False
    is_jumpdest: bool = False

    @property
    def is_push(self) -> bool:
        return self.mnemonic == "PUSH0" or self.immediate_width > 0

    @property
    def is_jump(self) -> bool:
        return self.mnemonic in ("JUMP", "JUMPI")


def _build_table() -> dict[int, OpcodeSpec]:
    table: dict[int, OpcodeSpec] = {}

    def op(byte: int, name: str, pops: int, pushes: int, *, width: int = 0,
           term: bool = False, call: bool = False, dest: bool = False) -> None:
        table[byte] = OpcodeSpec(byte, name, width, pops, pushes,
                                 is_terminator=term, is_call=call, is_jumpdest=dest)

    op(0x00, "STOP", 0, 0, term=True)
    op(0x01, "ADD", 2, 1)
    op(0x02, "MUL", 2, 1)
    op(0x03, "SUB", 2, 1)
    op(0x04, "DIV", 2, 1)
    op(0x05, "SDIV", 2, 1)
    op(0x06, "MOD", 2, 1)
    op(0x07, "SMOD", 2, 1)
    op(0x08, "ADDMOD", 3, 1)
    op(0x09, "MULMOD", 3, 1)
    op(0x0A, "EXP", 2, 1)
    op(0x0B, "SIGNEXTEND", 2, 1)
    op(0x10, "LT", 2, 1)
    op(0x11, "GT", 2, 1)
    op(0x12, "SLT", 2, 1)
    op(0x13, "SGT", 2, 1)
    op(0x14, "EQ", 2, 1)
    op(0x15, "ISZERO", 1, 1)
    op(0x16, "AND", 2, 1)
    op(0x17, "OR", 2, 1)
    op(0x18, "XOR", 2, 1)
    op(0x19, "NOT", 1, 1)
    op(0x1A, "BYTE", 2, 1)
    op(0x1B, "SHL", 2, 1)
    op(0x1C, "SHR", 2, 1)
    op(0x1D, "SAR", 2, 1)
    op(0x20, "KECCAK256", 2, 1)
    op(0x30, "ADDRESS", 0, 1)
    op(0x31, "BALANCE", 1, 1)
    op(0x32, "ORIGIN", 0, 1)
    op(0x33, "CALLER", 0, 1)
    op(0x34, "CALLVALUE", 0, 1)
    op(0x35, "CALLDATALOAD", 1, 1)
    op(0x36, "CALLDATASIZE", 0, 1)
    op(0x37, "CALLDATACOPY", 3, 0)
    op(0x38, "CODESIZE", 0, 1)
    op(0x39, "CODECOPY", 3, 0)
    op(0x3A, "GASPRICE", 0, 1)
    op(0x3B, "EXTCODESIZE", 1, 1)
    op(0x3C, "EXTCODECOPY", 4, 0)
    op(0x3D, "RETURNDATASIZE", 0, 1)
    op(0x3E, "RETURNDATACOPY", 3, 0)
    op(0x3F, "EXTCODEHASH", 1, 1)
    op(0x40, "BLOCKHASH", 1, 1)
    op(0x41, "COINBASE", 0, 1)
    op(0x42, "TIMESTAMP", 0, 1)
    op(0x43, "NUMBER", 0, 1)
    op(0x44, "PREVRANDAO", 0, 1)
    op(0x45, "GASLIMIT", 0, 1)
    op(0x46, "CHAINID", 0, 1)
    op(0x47, "SELFBALANCE", 0, 1)
    op(0x48, "BASEFEE", 0, 1)
    op(0x50, "POP", 1, 0)
    op(0x51, "MLOAD", 1, 1)
    op(0x52, "MSTORE", 2, 0)
    op(0x53, "MSTORE8", 2, 0)
    op(0x54, "SLOAD", 1, 1)
    op(0x55, "SSTORE", 2, 0)
    op(0x56, "JUMP", 1, 0, term=True)
    op(0x57, "JUMPI", 2, 0)
    op(0x58, "PC", 0, 1)
    op(0x59, "MSIZE", 0, 1)
    op(0x5A, "GAS", 0, 1)
    op(0x5B, "JUMPDEST", 0, 0, dest=True)
    op(0x5F, "PUSH0", 0, 1)
    for n in range(1, 33):
        op(0x5F + n, f"PUSH{n}", 0, 1, width=n)
    for n in range(1, 17):
        # DUPn reads n items and leaves n+1; SWAPn permutes the top n+1.
        op(0x7F + n, f"DUP{n}", n, n + 1)
        op(0x8F + n, f"SWAP{n}", n + 1, n + 1)
    for n in range(0, 5):
        op(0xA0 + n, f"LOG{n}", 2 + n, 0)
    op(0xF0, "CREATE", 3, 1)
    op(0xF1, "CALL", 7, 1, call=True)
    op(0xF2, "CALLCODE", 7, 1, call=True)
    op(0xF3, "RETURN", 2, 0, term=True)
    op(0xF4, "DELEGATECALL", 6, 1, call=True)
    op(0xF5, "CREATE2", 4, 1)
    op(0xFA, "STATICCALL", 6, 1, call=True)
    op(0xFD, "REVERT", 2, 0, term=True)
    op(0xFE, "INVALID", 0, 0, term=True)
    op(0xFF, "SELFDESTRUCT", 1, 0, term=True)

    for byte in range(0x100):
        if byte not in table:
            table[byte] = OpcodeSpec(byte, "INVALID", 0, 0, 0, is_terminator=True)
    return table


TABLE: dict[int, OpcodeSpec] = _build_table()
BY_NAME: dict[str, OpcodeSpec] = {}
for _spec in TABLE.values():
    BY_NAME.setdefault(_spec.mnemonic, _spec)


@dataclass(frozen=True)
class Instruction:
    """One decoded instruction at a fixed byte offset."""

    pc: int
    spec: OpcodeSpec
    operand: bytes = b""
    truncated: bool = False

    @property
    def mnemonic(self) -> str:
        return self.spec.mnemonic

    @property
    def size(self) -> int:
        return 1 + self.spec.immediate_width

    @property
    def operand_value(self) -> int | None:
        if self.spec.immediate_width == 0:
            return None
        return int.from_bytes(self.operand, "big")

    def __repr__(self) -> str:
        if self.operand:
            return f"{self.mnemonic}(0x{self.operand.hex()})@{self.pc}"
        return f"{self.mnemonic}@{self.pc}"


def decode_bytecode(code: bytes) -> list[Instruction]:
    """Decode raw runtime bytecode into a positional instruction stream.

    Total: undefined bytes become INVALID, and a PUSH immediate running past
    the end of code is zero-padded and flagged truncated.
    """
    out: list[Instruction] = []
    pc = 0
    n = len(code)
    while pc < n:
        spec = TABLE[code[pc]]
        width = spec.immediate_width
        raw = bytes(code[pc + 1:pc + 1 + width])
        truncated = len(raw) < width
        if truncated:
            raw = raw + b"\x00" * (width - len(raw))
        out.append(Instruction(pc, spec, raw, truncated))
        pc += 1 + width
    return out


def encode_instructions(instructions: list[Instruction]) -> bytes:
    """Inverse of decode_bytecode, up to zero-padding of a trailing truncated PUSH."""
    parts = []
    for ins in instructions:
        parts.append(bytes([ins.spec.byte_value]))
        parts.append(ins.operand)
    return b"".join(parts)


def stack_effect(spec: OpcodeSpec) -> tuple[int, int]:
    """(pops, pushes) for one opcode; DUPn is (n, n+1), SWAPn is (n+1, n+1)."""
    return spec.pops, spec.pushes


def parse_hex(text: str) -> bytes:
    """Parse a hex blob with optional 0x prefix and ignored ASCII whitespace."""
    compact = "".join(text.split())
    if compact.lower().startswith("0x"):
        compact = compact[2:]
    if len(compact) % 2:
        raise ValueError("odd number of hex digits")
    try:
        return bytes.fromhex(compact)
    except ValueError as exc:
        raise ValueError(f"not valid hex: {exc}") from exc


def format_instruction(ins: Instruction) -> str:
    line = f"{ins.pc}: {ins.mnemonic}"
    if ins.spec.immediate_width > 0:
        line += f" 0x{ins.operand.hex()}"
    if ins.truncated:
        line += " (truncated)"
    return line


def format_listing(instructions: list[Instruction]) -> str:
    """Textual disassembly, one `pc: MNEMONIC operand-hex` line per instruction."""
    return "\n".join(format_instruction(ins) for ins in instructions) + ("\n" if instructions else "")


def selector_hex(selector: bytes) -> str:
    return "0x" + selector.hex()
