import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from branchnas.config import ArchConfig, ConfigError
from branchnas.genotype import (
    AGGREGATION,
    INDIVIDUAL,
    OPS,
    CellGenotype,
    Genotype,
    GenotypeParseError,
    GenotypeValidationError,
    UnknownOpError,
    cell_keys,
    count_search_space,
    decode,
    encode,
    enumerate_genotypes,
    num_edges,
    random_genotype,
    validate,
)


def minimal_arch():
    return ArchConfig(branches=1, num_stages=1, modules_per_stage=2, nodes_individual=1,
                      nodes_aggregation=1, channels=(8,))


def all_skip(arch, scales):
    cells = {}
    for branch, role in cell_keys(arch):
        k = arch.nodes_aggregation if role == AGGREGATION else arch.nodes_individual
        cells[(branch, role)] = CellGenotype.from_ops(
            role, k, arch.branches, ["skip"] * num_edges(role, k, arch.branches))
    return Genotype(arch, cells, scales)


def test_six_ops():
    assert OPS == ("conv1x1", "conv3x3", "conv5x5", "avgpool3x3", "maxpool3x3", "skip")


def test_minimal_round_trip():
    g = all_skip(minimal_arch(), [[1]])
    assert decode(encode(g)) == g


def test_scale_bits_literal_in_document():
    arch = ArchConfig()
    g = replace(random_genotype(arch, 0), scales=((1, 0, 1, 0), (1, 1, 1, 1), (0, 0, 0, 1)))
    assert "- [1, 0, 1, 0]" in encode(g)


def test_documents_differ_only_in_changed_op():
    arch = ArchConfig()
    g = random_genotype(arch, 1)
    cell = g.cells[(2, INDIVIDUAL)]
    ops = cell.ops
    ops[3] = "skip" if ops[3] != "skip" else "conv1x1"
    cells = dict(g.cells)
    cells[(2, INDIVIDUAL)] = CellGenotype.from_ops(INDIVIDUAL, cell.num_nodes, 4, ops)
    a = encode(g).splitlines()
    b = encode(Genotype(arch, cells, g.scales)).splitlines()
    assert len(a) == len(b)
    diff = [(x, y) for x, y in zip(a, b) if x != y]
    assert len(diff) == 1
    assert cell.ops[3] in diff[0][0] and ops[3] in diff[0][1]


def test_encode_is_stable():
    g = random_genotype(ArchConfig(), 5)
    assert encode(g) == encode(g)
    assert encode(decode(encode(g))) == encode(g)


def test_unknown_op_rejected():
    text = encode(all_skip(minimal_arch(), [[1]])).replace("skip", "conv7x7", 1)
    with pytest.raises(UnknownOpError):
        decode(text)


def test_short_scale_vector_rejected():
    g = random_genotype(ArchConfig(), 0)
    bad = replace(g, scales=((1, 0, 1),) + g.scales[1:])
    with pytest.raises(GenotypeValidationError):
        encode(bad)
    text = encode(g).replace(f"- {list(g.scales[0])}".replace("'", ""), "- [1, 0, 1]", 1)
    with pytest.raises(GenotypeValidationError, match="length 3"):
        decode(text)


def test_malformed_document_reports_location():
    with pytest.raises(GenotypeParseError, match="line"):
        decode("format_version: 1\ncells: {a: [1, 2\n")


def test_fingerprint_mismatch_rejected():
    text = encode(random_genotype(ArchConfig(), 0))
    text = text.replace("branches: 4", "branches: 3")
    with pytest.raises(GenotypeValidationError, match="fingerprint"):
        decode(text)


def test_missing_cell_reported():
    g = random_genotype(ArchConfig(), 0)
    cells = dict(g.cells)
    del cells[(3, AGGREGATION)]
    with pytest.raises(GenotypeValidationError, match="missing cell"):
        validate(Genotype(g.config, cells, g.scales))


def test_edge_counts():
    assert num_edges(INDIVIDUAL, 4, 4) == 10
    # node i: (i - 1) intra edges + B branch edges
    assert num_edges(AGGREGATION, 2, 4) == (0 + 4) + (1 + 4)


def test_random_genotype_deterministic():
    arch = ArchConfig()
    assert random_genotype(arch, 42) == random_genotype(arch, 42)
    assert random_genotype(arch, 42) != random_genotype(arch, 43)


def test_random_genotype_frequencies():
    arch = ArchConfig()
    samples = [random_genotype(arch, s) for s in range(10_000)]
    bits = np.array([g.scales for g in samples])
    rates = bits.mean(axis=0)
    assert rates.min() >= 0.47 and rates.max() <= 0.53
    ops = [g.cells[(1, INDIVIDUAL)].ops[0] for g in samples]
    for op in OPS:
        assert abs(ops.count(op) / len(ops) - 1 / 6) <= 0.02


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), branches=st.integers(1, 4),
       share_branches=st.booleans(), share_individual=st.booleans(),
       granularity=st.sampled_from(["stage", "module"]), k_m=st.integers(0, 2))
def test_round_trip_property(seed, branches, share_branches, share_individual, granularity, k_m):
    arch = ArchConfig(branches=branches, nodes_aggregation=k_m, channels=(8,) * branches,
                      share_branches=share_branches, share_individual=share_individual,
                      scale_granularity=granularity)
    g = random_genotype(arch, seed)
    validate(g)
    assert decode(encode(g)) == g


# --- counting ------------------------------------------------------------------

def _brute_force(arch, convention=None):
    seen = set()
    for g in enumerate_genotypes(arch, convention):
        validate(g)
        seen.add((tuple(sorted((k, tuple(c.ops)) for k, c in g.cells.items())), g.scales))
    return len(seen)


@pytest.mark.parametrize("arch_kw, convention, expected", [
    (dict(branches=1, num_stages=1, nodes_individual=1, nodes_aggregation=0), None, 12),
    (dict(branches=2, num_stages=1, nodes_individual=2, nodes_aggregation=1), "branch-shared",
     31104),
    (dict(branches=1, num_stages=2, nodes_individual=1, nodes_aggregation=1),
     "split-individual", 864),
    (dict(branches=2, num_stages=1, modules_per_stage=2, nodes_individual=1,
          nodes_aggregation=0, scale_granularity="module"), None, 576),
])
def test_count_matches_brute_force(arch_kw, convention, expected):
    arch = ArchConfig(channels=(8,) * arch_kw["branches"], **arch_kw)
    # closed forms: 2 * 6; 2^2 * 6^3 * 6^2; 2^2 * 6 * 6 * 6; 2^4 * 6 * 6
    assert count_search_space(arch, convention).count == expected
    assert _brute_force(arch, convention) == expected


def test_default_space_count():
    size = count_search_space(ArchConfig())
    # 2^12 scale bits; per branch: individual 6^10, aggregation 6^9
    assert size.count == 2 ** 12 * (6 ** 10 * 6 ** 9) ** 4
    assert 56 <= size.exponent <= 65
    assert str(size) == "5.65e62"
    assert math.isclose(size.mantissa * 10 ** size.exponent, size.count, rel_tol=1e-12)


def test_conventions_change_count():
    counts = {c: count_search_space(ArchConfig(), c).count
              for c in ("default", "split-individual", "branch-shared", "branch-shared-split")}
    assert counts["split-individual"] == counts["default"] * 6 ** 40
    assert counts["branch-shared"] == 2 ** 12 * 6 ** 19


def test_count_rejects_non_positive():
    with pytest.raises(ConfigError):
        count_search_space(ArchConfig(nodes_individual=0))
    with pytest.raises(ConfigError):
        count_search_space(ArchConfig(), "per-stage-cells")
