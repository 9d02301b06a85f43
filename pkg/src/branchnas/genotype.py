"""Discrete architecture encoding: cells, scale vectors, serialization, counting."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple

import numpy as np
import yaml

from .config import ArchConfig, ConfigError

OPS = ("conv1x1", "conv3x3", "conv5x5", "avgpool3x3", "maxpool3x3", "skip")
OP_INDEX = {name: i for i, name in enumerate(OPS)}

INDIVIDUAL = "individual"
INDIVIDUAL1 = "individual1"
INDIVIDUAL2 = "individual2"
AGGREGATION = "aggregation"
ROLES = (INDIVIDUAL, INDIVIDUAL1, INDIVIDUAL2, AGGREGATION)

FORMAT_VERSION = 1

# Named cell-sharing conventions accepted by count_search_space and the CLI.
CONVENTIONS = {
    "default": {"share_branches": False, "share_individual": True},
    "split-individual": {"share_branches": False, "share_individual": False},
    "branch-shared": {"share_branches": True, "share_individual": True},
    "branch-shared-split": {"share_branches": True, "share_individual": False},
}


class GenotypeError(ValueError):
    pass


class GenotypeParseError(GenotypeError):
    pass


class UnknownOpError(GenotypeError):
    pass


class GenotypeValidationError(GenotypeError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid genotype: " + "; ".join(self.problems))


def individual_edges(num_nodes: int) -> list[tuple[int, int]]:
    """(target, source) pairs; source 0 is the cell input."""
    return [(i, j) for i in range(1, num_nodes + 1) for j in range(i)]


def aggregation_intra_edges(num_nodes: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(1, num_nodes + 1) for j in range(1, i)]


def aggregation_branch_edges(num_nodes: int, branches: int) -> list[tuple[int, int]]:
    return [(i, b) for i in range(1, num_nodes + 1) for b in range(1, branches + 1)]


def num_edges(role: str, num_nodes: int, branches: int) -> int:
    if role == AGGREGATION:
        return len(aggregation_intra_edges(num_nodes)) + num_nodes * branches
    return len(individual_edges(num_nodes))


@dataclass(frozen=True)
class CellGenotype:
    role: str
    num_nodes: int
    edges: tuple[tuple[int, int, str], ...]
    branch_edges: tuple[tuple[int, int, str], ...] = ()

    @property
    def ops(self) -> list[str]:
        """Ops in the canonical edge order (intra edges first, then branch edges)."""
        return [e[2] for e in self.edges] + [e[2] for e in self.branch_edges]

    @classmethod
    def from_ops(cls, role: str, num_nodes: int, branches: int, ops) -> "CellGenotype":
        ops = list(ops)
        if role == AGGREGATION:
            intra = aggregation_intra_edges(num_nodes)
            branch = aggregation_branch_edges(num_nodes, branches)
            if len(ops) != len(intra) + len(branch):
                raise GenotypeError(f"expected {len(intra) + len(branch)} ops, got {len(ops)}")
            return cls(role, num_nodes,
                       tuple((i, j, op) for (i, j), op in zip(intra, ops)),
                       tuple((i, b, op) for (i, b), op in zip(branch, ops[len(intra):])))
        pairs = individual_edges(num_nodes)
        if len(ops) != len(pairs):
            raise GenotypeError(f"expected {len(pairs)} ops, got {len(ops)}")
        return cls(role, num_nodes, tuple((i, j, op) for (i, j), op in zip(pairs, ops)))


def cell_roles(arch: ArchConfig) -> list[str]:
    roles = [INDIVIDUAL] if arch.share_individual else [INDIVIDUAL1, INDIVIDUAL2]
    if arch.has_aggregation_cells:
        roles.append(AGGREGATION)
    return roles


def cell_keys(arch: ArchConfig) -> list[tuple[int, str]]:
    """Distinct cells under the sharing convention; branch 0 means shared by all branches."""
    branches = [0] if arch.share_branches else range(1, arch.branches + 1)
    return [(b, role) for b in branches for role in cell_roles(arch)]


def cell_key(arch: ArchConfig, branch: int, position: str) -> tuple[int, str]:
    """Map a cell slot (branch, position in {'I1', 'I2', 'M'}) to its genotype key."""
    b = 0 if arch.share_branches else branch
    if position == "M":
        return (b, AGGREGATION)
    if arch.share_individual:
        return (b, INDIVIDUAL)
    return (b, INDIVIDUAL1 if position == "I1" else INDIVIDUAL2)


def cell_num_nodes(arch: ArchConfig, role: str) -> int:
    return arch.nodes_aggregation if role == AGGREGATION else arch.nodes_individual


@dataclass(frozen=True)
class Genotype:
    config: ArchConfig
    cells: dict = field(default_factory=dict)
    scales: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(tuple(int(b) for b in s) for s in self.scales))

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def module_scales(self) -> list[tuple[int, ...]]:
        """One scale vector per multi-scale module (stage vectors broadcast)."""
        if self.config.scale_granularity == "module":
            return list(self.scales)
        return [s for s in self.scales for _ in range(self.config.modules_per_stage)]

    def cell(self, branch: int, position: str) -> CellGenotype:
        return self.cells[cell_key(self.config, branch, position)]


def validation_problems(g: Genotype) -> list[str]:
    arch = g.config
    problems = []
    try:
        arch.validate()
    except ConfigError as exc:
        return [f"config: {exc}"]
    expected = set(cell_keys(arch))
    got = set(g.cells)
    for key in sorted(expected - got):
        problems.append(f"missing cell {key}")
    for key in sorted(got - expected, key=str):
        problems.append(f"unexpected cell {key}")
    for key in sorted(expected & got):
        cell = g.cells[key]
        where = f"cell {key}"
        role = key[1]
        if cell.role != role:
            problems.append(f"{where}: role {cell.role!r} does not match key")
        k = cell_num_nodes(arch, role)
        if cell.num_nodes != k:
            problems.append(f"{where}: {cell.num_nodes} nodes, config says {k}")
        if role == AGGREGATION:
            want_intra = aggregation_intra_edges(k)
            want_branch = aggregation_branch_edges(k, arch.branches)
        else:
            want_intra, want_branch = individual_edges(k), []
        if [(e[0], e[1]) for e in cell.edges] != want_intra:
            problems.append(f"{where}: edge topology does not match {len(want_intra)} "
                            f"canonical edges")
        if [(e[0], e[1]) for e in cell.branch_edges] != want_branch:
            problems.append(f"{where}: branch-edge topology does not match "
                            f"{len(want_branch)} canonical edges")
        for op in cell.ops:
            if op not in OP_INDEX:
                problems.append(f"{where}: unknown op {op!r}")
    if len(g.scales) != arch.num_scale_vectors:
        problems.append(f"expected {arch.num_scale_vectors} scale vectors "
                        f"({arch.scale_granularity} granularity), got {len(g.scales)}")
    for n, s in enumerate(g.scales):
        if len(s) != arch.branches:
            problems.append(f"scale vector {n} has length {len(s)}, expected {arch.branches}")
        if any(b not in (0, 1) for b in s):
            problems.append(f"scale vector {n} is not binary: {list(s)}")
    return problems


def validate(g: Genotype) -> Genotype:
    problems = validation_problems(g)
    if problems:
        raise GenotypeValidationError(problems)
    return g


def _to_document(g: Genotype) -> dict:
    cells: dict = {}
    for (branch, role), cell in g.cells.items():
        entry = {"num_nodes": cell.num_nodes, "edges": [list(e) for e in cell.edges]}
        if role == AGGREGATION:
            entry["branch_edges"] = [list(e) for e in cell.branch_edges]
        cells.setdefault(branch, {})[role] = entry
    return {
        "format_version": FORMAT_VERSION,
        "fingerprint": g.fingerprint,
        "config": g.config.to_dict(),
        "cells": cells,
        "scales": [list(s) for s in g.scales],
    }


def encode(g: Genotype) -> str:
    validate(g)
    return yaml.safe_dump(_to_document(g), sort_keys=True, default_flow_style=None,
                          width=120)


def decode(text: str) -> Genotype:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise GenotypeParseError(f"malformed genotype document{where}: {exc}") from exc
    if not isinstance(doc, dict):
        raise GenotypeParseError("genotype document must be a mapping")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise GenotypeParseError(f"unsupported format_version {version!r}")
    for key in ("config", "cells", "scales"):
        if key not in doc:
            raise GenotypeParseError(f"missing top-level key {key!r}")
    try:
        arch = ArchConfig(**doc["config"])
    except TypeError as exc:
        raise GenotypeParseError(f"config: {exc}") from exc
    if "fingerprint" in doc and doc["fingerprint"] != arch.fingerprint():
        raise GenotypeValidationError(
            [f"fingerprint {doc['fingerprint']} does not match config ({arch.fingerprint()})"])
    cells = {}
    try:
        for branch, roles in doc["cells"].items():
            for role, entry in roles.items():
                edges = tuple(_edge(e, f"cells.{branch}.{role}.edges") for e in entry["edges"])
                branch_edges = tuple(_edge(e, f"cells.{branch}.{role}.branch_edges")
                                     for e in entry.get("branch_edges", []))
                cells[(int(branch), role)] = CellGenotype(role, int(entry["num_nodes"]),
                                                          edges, branch_edges)
        scales = tuple(tuple(s) for s in doc["scales"])
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        if isinstance(exc, GenotypeError):
            raise
        raise GenotypeParseError(f"malformed cells/scales section: {exc!r}") from exc
    return validate(Genotype(arch, cells, scales))


def _edge(e, where: str) -> tuple[int, int, str]:
    if not isinstance(e, list) or len(e) != 3:
        raise GenotypeParseError(f"{where}: edge must be [target, source, op], got {e!r}")
    target, source, op = e
    if op not in OP_INDEX:
        raise UnknownOpError(f"{where}: unknown op {op!r}; expected one of {list(OPS)}")
    return (int(target), int(source), op)


def random_genotype(arch: ArchConfig, seed: int) -> Genotype:
    arch.validate()
    rng = np.random.default_rng(seed)
    cells = {}
    for branch, role in cell_keys(arch):
        k = cell_num_nodes(arch, role)
        ops = [OPS[i] for i in rng.integers(len(OPS), size=num_edges(role, k, arch.branches))]
        cells[(branch, role)] = CellGenotype.from_ops(role, k, arch.branches, ops)
    scales = rng.integers(2, size=(arch.num_scale_vectors, arch.branches))
    return Genotype(arch, cells, tuple(map(tuple, scales.tolist())))


class SearchSpaceSize(NamedTuple):
    count: int
    mantissa: float
    exponent: int

    def __str__(self) -> str:
        return f"{self.mantissa:.2f}e{self.exponent}"


def _with_convention(arch: ArchConfig, convention: str | None) -> ArchConfig:
    if convention is None:
        return arch
    if convention not in CONVENTIONS:
        raise ConfigError(f"unknown convention {convention!r}; expected one of "
                          f"{sorted(CONVENTIONS)}")
    return replace(arch, **CONVENTIONS[convention])


def count_search_space(arch: ArchConfig, convention: str | None = None) -> SearchSpaceSize:
    arch = _with_convention(arch, convention)
    arch.validate()
    total = 2 ** (arch.num_scale_vectors * arch.branches)
    for _, role in cell_keys(arch):
        total *= len(OPS) ** num_edges(role, cell_num_nodes(arch, role), arch.branches)
    exponent = len(str(total)) - 1
    return SearchSpaceSize(total, total / 10 ** exponent, exponent)


def enumerate_genotypes(arch: ArchConfig, convention: str | None = None) -> Iterator[Genotype]:
    """Every genotype of a (small) search space; used as a brute-force oracle."""
    arch = _with_convention(arch, convention)
    keys = cell_keys(arch)
    sizes = [num_edges(role, cell_num_nodes(arch, role), arch.branches) for _, role in keys]
    n_bits = arch.num_scale_vectors * arch.branches
    for ops in itertools.product(OPS, repeat=sum(sizes)):
        cells, start = {}, 0
        for (branch, role), n in zip(keys, sizes):
            cells[(branch, role)] = CellGenotype.from_ops(
                role, cell_num_nodes(arch, role), arch.branches, ops[start:start + n])
            start += n
        for bits in itertools.product((0, 1), repeat=n_bits):
            scales = [bits[i:i + arch.branches] for i in range(0, n_bits, arch.branches)]
            yield Genotype(arch, cells, scales)

