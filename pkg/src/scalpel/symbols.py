"""Address-to-function-name resolution from symbol tables.

Two sources feed a :class:`SymbolMap`: the ELF symbol table of a binary
(function symbols only) and a portable text map file with one
``<hex-start> <hex-size> <name>`` line per symbol.  Resolution is total:
addresses outside every known range render as bare hex so reports from
partially stripped binaries stay usable.
"""

from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass


class FormatError(Exception):
    """Malformed map file or symbol table."""


class AmbiguousNameError(Exception):
    """A name lookup matched several symbols; all addresses are reported."""

    def __init__(self, name: str, addresses: list[int]):
        self.name = name
        self.addresses = sorted(addresses)
        rendered = ", ".join(hex(a) for a in self.addresses)
        super().__init__(f"symbol name '{name}' is ambiguous: {rendered}")


@dataclass(frozen=True)
class Symbol:
    start: int
    size: int
    name: str


# A final zero-size symbol is assumed to span this many bytes.
_TAIL_SPAN = 4096


class SymbolMap:
    """Immutable address-range table, strictly ascending and overlap-free.

    Zero-size symbols (emitted by some toolchains) extend to the next
    symbol's start; a trailing zero-size symbol covers 4096 bytes.
    """

    def __init__(self, entries: list[Symbol]):
        ordered = sorted(entries, key=lambda s: s.start)
        prev: Symbol | None = None
        for sym in ordered:
            if prev is not None:
                if sym.start == prev.start:
                    raise FormatError(
                        f"duplicate symbol address {hex(sym.start)} ({prev.name}, {sym.name})")
                if prev.size and prev.start + prev.size > sym.start:
                    raise FormatError(
                        f"overlapping symbols: {prev.name} [{hex(prev.start)}+{hex(prev.size)}) "
                        f"and {sym.name} at {hex(sym.start)}")
            prev = sym
        self.entries: tuple[Symbol, ...] = tuple(ordered)
        self._starts = [s.start for s in ordered]
        self._by_name: dict[str, list[int]] = {}
        for sym in ordered:
            self._by_name.setdefault(sym.name, []).append(sym.start)

    def __len__(self) -> int:
        return len(self.entries)

    def _end_of(self, idx: int) -> int:
        sym = self.entries[idx]
        if sym.size:
            return sym.start + sym.size
        if idx + 1 < len(self.entries):
            return self.entries[idx + 1].start
        return sym.start + _TAIL_SPAN

    def resolve(self, address: int) -> str:
        """Name of the symbol whose range contains ``address``, or bare hex."""
        idx = bisect_right(self._starts, address) - 1
        if idx >= 0 and address < self._end_of(idx):
            return self.entries[idx].name
        return f"0x{address:x}"

    def lookup_by_name(self, name: str) -> int | None:
        """Start address of the unique symbol called ``name``; None if absent."""
        starts = self._by_name.get(name)
        if starts is None:
            return None
        if len(starts) > 1:
            raise AmbiguousNameError(name, starts)
        return starts[0]

    def names(self) -> set[str]:
        return set(self._by_name)

    def rebase(self, delta: int) -> "SymbolMap":
        """Shift every symbol by ``delta`` (load bias of a PIE/shared object)."""
        if delta == 0:
            return self
        return SymbolMap([Symbol(s.start + delta, s.size, s.name) for s in self.entries])

    def load_bias(self, anchor_name: str, runtime_address: int) -> int:
        """Bias such that the anchor's rebased start equals its runtime address."""
        start = self.lookup_by_name(anchor_name)
        if start is None:
            raise FormatError(f"anchor symbol '{anchor_name}' not in map")
        return runtime_address - start


def _parse_text_map(text: str) -> SymbolMap:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 2)
        if len(parts) != 3:
            raise FormatError(f"line {lineno}: expected '<hex-start> <hex-size> <name>'")
        try:
            start = int(parts[0], 16)
            size = int(parts[1], 16)
        except ValueError:
            raise FormatError(f"line {lineno}: bad hex field") from None
        entries.append(Symbol(start, size, parts[2].strip()))
    return SymbolMap(entries)


# ELF constants used below
_SHT_SYMTAB = 2
_SHT_DYNSYM = 11
_STT_FUNC = 2
_STB_GLOBAL = 1
_SHN_UNDEF = 0


def _parse_elf_functions(data: bytes) -> list[Symbol]:
    """Extract defined function symbols from an ELF image (32/64, LE/BE)."""
    if len(data) < 0x34 or data[:4] != b"\x7fELF":
        raise FormatError("not an ELF image")
    is64 = data[4] == 2
    endian = "<" if data[5] == 1 else ">"
    if is64:
        e_shoff, = struct.unpack_from(endian + "Q", data, 0x28)
        e_shentsize, e_shnum = struct.unpack_from(endian + "HH", data, 0x3A)
    else:
        e_shoff, = struct.unpack_from(endian + "I", data, 0x20)
        e_shentsize, e_shnum = struct.unpack_from(endian + "HH", data, 0x2E)

    sections = []
    for i in range(e_shnum):
        off = e_shoff + i * e_shentsize
        if is64:
            sh_type, = struct.unpack_from(endian + "I", data, off + 4)
            sh_offset, sh_size = struct.unpack_from(endian + "QQ", data, off + 0x18)
            sh_link, = struct.unpack_from(endian + "I", data, off + 0x28)
            sh_entsize, = struct.unpack_from(endian + "Q", data, off + 0x38)
        else:
            sh_type, = struct.unpack_from(endian + "I", data, off + 4)
            sh_offset, sh_size = struct.unpack_from(endian + "II", data, off + 0x10)
            sh_link, = struct.unpack_from(endian + "I", data, off + 0x18)
            sh_entsize, = struct.unpack_from(endian + "I", data, off + 0x24)
        sections.append((sh_type, sh_offset, sh_size, sh_link, sh_entsize))

    symtab = next((s for s in sections if s[0] == _SHT_SYMTAB), None)
    if symtab is None:
        symtab = next((s for s in sections if s[0] == _SHT_DYNSYM), None)
    if symtab is None:
        return []
    _, sym_off, sym_size, str_idx, entsize = symtab
    if str_idx >= len(sections):
        raise FormatError("symbol table references a bad string table")
    str_off, str_size = sections[str_idx][1], sections[str_idx][2]
    strtab = data[str_off:str_off + str_size]

    def sym_name(name_off: int) -> str:
        end = strtab.find(b"\x00", name_off)
        return strtab[name_off:end].decode("utf-8", "replace") if end > name_off else ""

    raw: list[tuple[int, int, int, str]] = []  # (value, size, bind, name)
    count = sym_size // entsize if entsize else 0
    for i in range(count):
        off = sym_off + i * entsize
        if is64:
            st_name, st_info = struct.unpack_from(endian + "IB", data, off)
            st_shndx, = struct.unpack_from(endian + "H", data, off + 6)
            st_value, st_size = struct.unpack_from(endian + "QQ", data, off + 8)
        else:
            st_name, st_value, st_size = struct.unpack_from(endian + "III", data, off)
            st_info, = struct.unpack_from(endian + "B", data, off + 12)
            st_shndx, = struct.unpack_from(endian + "H", data, off + 14)
        if st_info & 0xF != _STT_FUNC or st_shndx == _SHN_UNDEF:
            continue
        name = sym_name(st_name)
        if name:
            raw.append((st_value, st_size, st_info >> 4, name))

    # Aliases and nested ranges are legal in real symbol tables; keep one
    # representative per address range (prefer global binding, then size).
    raw.sort(key=lambda t: (t[0], -(t[2] == _STB_GLOBAL), -t[1], t[3]))
    entries: list[Symbol] = []
    covered_end = -1
    last_start = -1
    for value, size, _bind, name in raw:
        if value == last_start or value < covered_end:
            continue
        entries.append(Symbol(value, size, name))
        last_start = value
        covered_end = max(covered_end, value + size)
    return entries


def load_symbol_map(source: str) -> SymbolMap:
    """Load function symbols from ``source`` (ELF binary or text map file)."""
    with open(source, "rb") as fh:
        data = fh.read()
    if data[:4] == b"\x7fELF":
        return SymbolMap(_parse_elf_functions(data))
    return _parse_text_map(data.decode("utf-8"))
