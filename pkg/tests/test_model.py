import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccmix.model import (BlockParams, BlockPartition, CcmModel, MaxDepParams, ModelError,
                         all_delta_tables, block_log_pdf, block_marginals, count_surjections,
                         dumps_model, enumerate_cells, indep_log_pdf, maxdep_log_pdf,
                         mixture_log_pdf, mixture_logpdf_rows, model_from_json, model_to_json,
                         nu_ccm, nu_cim, random_block_params, read_model, sample,
                         surjection_space_size, write_model)

from conftest import random_model, random_structure

FIG2A = MaxDepParams(np.array([0.1, 0.3, 0.2, 0.4]), (np.array([0, 1, 2, 2]),))
FIG2B = MaxDepParams(np.array([0.5, 0.5]), (np.array([0, 1]), np.array([0, 1])))


def free_parameter_count(model: CcmModel) -> int:
    """Walk the serialized parameters: every probability vector loses one
    degree of freedom, every multi-variable block adds its rho."""
    obj = model_to_json(model)
    count = len(obj["pi"]) - 1
    for block in obj["blocks"]:
        count += sum(len(a) - 1 for a in block["alpha"])
        if len(block["variables"]) > 1:
            tau_len = len(block["alpha"][0])
            count += 1 + tau_len - 1
    return count


def test_indep_log_pdf_examples():
    half = (np.array([0.5, 0.5]), np.array([0.5, 0.5]))
    assert indep_log_pdf([1, 2], half) == pytest.approx(math.log(0.25))
    assert indep_log_pdf([2], (np.array([0.2, 0.8]),)) == pytest.approx(math.log(0.8))
    a = np.array([0.2, 0.2, 0.6])
    assert indep_log_pdf([3, 3, 3], (a, a, a)) == pytest.approx(math.log(0.216))
    with pytest.raises(ModelError):
        indep_log_pdf([3], (np.array([0.5, 0.5]),))


def test_maxdep_log_pdf_figure_examples():
    assert maxdep_log_pdf([1, 1], FIG2A) == pytest.approx(math.log(0.1))
    assert maxdep_log_pdf([4, 3], FIG2A) == pytest.approx(math.log(0.4))
    assert maxdep_log_pdf([1, 2], FIG2A) == -math.inf
    assert maxdep_log_pdf([2, 2, 2], FIG2B) == pytest.approx(math.log(0.5))


def test_maxdep_support_has_one_cell_per_first_modality():
    for p, m in ((FIG2A, (4, 3)), (FIG2B, (2, 2, 2))):
        finite = [c for c in itertools.product(*[range(1, mj + 1) for mj in m])
                  if maxdep_log_pdf(c, p) > -math.inf]
        assert len(finite) == m[0]


def test_block_log_pdf_cases():
    u = np.array([0.5, 0.5])
    theta = BlockParams(0.5, (u, u, u), FIG2B)
    assert block_log_pdf([1, 1, 1], theta) == pytest.approx(math.log(0.3125))
    zero = BlockParams(0.0, (u, u, u), FIG2B)
    assert block_log_pdf([1, 2, 1], zero) == indep_log_pdf([1, 2, 1], (u, u, u))
    one = BlockParams(1.0, (u, u, u), FIG2B)
    assert block_log_pdf([2, 2, 2], one) == pytest.approx(math.log(0.5))


def test_mixture_special_cases(rng):
    m = (3, 2, 2)
    single = random_model(rng, 1, m, BlockPartition.singletons(1, 3))
    row = [2, 1, 2]
    expected = sum(math.log(single.blocks[0][j].alpha[0][row[j] - 1]) for j in range(3))
    assert mixture_log_pdf(row, single) == pytest.approx(expected)
    base = random_model(rng, 1, m, BlockPartition.from_lists([[[0, 1], [2]]], m))
    twin = CcmModel(2, BlockPartition.replicate([[0, 1], [2]], 2, m), np.array([0.5, 0.5]),
                    base.blocks * 2, m)
    for cell in itertools.product(range(1, 4), range(1, 3), range(1, 3)):
        assert mixture_log_pdf(cell, twin) == pytest.approx(mixture_log_pdf(cell, base))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalization_brute_force(seed):
    rng = np.random.default_rng(seed)
    g, m = random_structure(rng)
    model = random_model(rng, g, m)
    total = sum(math.exp(mixture_log_pdf(c, model))
                for c in itertools.product(*[range(1, mj + 1) for mj in m]))
    assert total == pytest.approx(1.0, abs=1e-10)
    cells = enumerate_cells(m)
    assert np.allclose(mixture_logpdf_rows(cells, model),
                       [mixture_log_pdf(c + 1, model) for c in cells], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_block_marginals_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 4))
    m = tuple(sorted(rng.integers(2, 5, size=d).tolist(), reverse=True))
    theta = random_block_params(m, rng)
    marg = [np.zeros(mj) for mj in m]
    for cell in itertools.product(*[range(1, mj + 1) for mj in m]):
        p = math.exp(block_log_pdf(cell, theta))
        for j, c in enumerate(cell):
            marg[j][c - 1] += p
    for got, want in zip(block_marginals(theta, m), marg):
        assert np.allclose(got, want, atol=1e-12)


def test_partition_canonical_form():
    m = (2, 3, 2, 3)
    a = BlockPartition.from_lists([[[2, 0], [3, 1]]], m)
    b = BlockPartition.from_lists([[[1, 3], [0, 2]]], m)
    assert a == b
    # blocks sorted by smallest member, variables by decreasing modality count
    assert a.components == (((0, 2), (1, 3)),)
    assert BlockPartition.from_lists([[[0, 1, 2, 3]]], m).components[0][0] == (1, 3, 0, 2)
    with pytest.raises(ModelError):
        BlockPartition.from_lists([[[0, 1], [1, 2, 3]]], m)
    with pytest.raises(ModelError):
        BlockPartition.from_lists([[[0, 1], [2]]], m)


def test_parameter_validation():
    u = np.array([0.5, 0.5])
    with pytest.raises(ModelError):
        BlockParams(0.5, (u, u), MaxDepParams(u, (np.array([0, 0]),))).validate((2, 2))
    with pytest.raises(ModelError):
        BlockParams(1.5, (u, u), MaxDepParams(u, (np.array([0, 1]),))).validate((2, 2))
    with pytest.raises(ModelError):
        BlockParams(0.5, (u,)).validate((2,))


def test_nu_examples():
    assert nu_cim(1, (2, 2)) == 2
    assert nu_cim(2, (2,) * 5) == 11
    m = (2,) * 5
    dentist = BlockPartition.from_lists([[[0, 1, 2, 3, 4]], [[2, 3], [0, 1, 4]]], m)
    assert nu_ccm(2, dentist, m) == 17
    for g in (1, 2, 3):
        assert nu_ccm(g, BlockPartition.singletons(g, 5), m) == nu_cim(g, m)


def test_nu_published_calves_sizes():
    # nine variables whose modality counts sum to 26 give 17 free parameters per class
    m = (4, 3, 3, 3, 3, 3, 3, 2, 2)
    assert [nu_cim(g, m) for g in range(1, 9)] == [17, 35, 53, 71, 89, 107, 125, 143]
    # two multi-variable blocks led by 4- and 3-modality variables add 7
    part = BlockPartition.from_lists([[[0, 7], [1, 2], [3], [4], [5], [6], [8]]], m)
    assert nu_ccm(1, part, m) == 24


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_nu_matches_free_parameter_walk(seed):
    rng = np.random.default_rng(seed)
    g, m = random_structure(rng, d_max=6, m_max=5, g_max=4)
    model = random_model(rng, g, m)
    assert model.n_params == free_parameter_count(model)
    assert nu_ccm(g, model.partition, m) == free_parameter_count(model)


def test_surjection_counts():
    assert surjection_space_size((2, 2)) == 2
    assert surjection_space_size((3, 2)) == 6
    assert surjection_space_size((5, 4, 3)) == 36000
    assert count_surjections(5, 4) == 240 and count_surjections(5, 3) == 150
    with pytest.raises(ModelError):
        surjection_space_size((2, 3))


@pytest.mark.parametrize("a,b", [(2, 2), (3, 2), (4, 2), (4, 3), (5, 3), (5, 4)])
def test_surjection_count_brute_force(a, b):
    n = sum(1 for img in itertools.product(range(b), repeat=a) if len(set(img)) == b)
    assert count_surjections(a, b) == n


def test_all_delta_tables_are_distinct_and_valid():
    tables = all_delta_tables((3, 2, 3))
    assert tables.shape == (surjection_space_size((3, 2, 3)), 2, 3)
    assert len({t.tobytes() for t in tables}) == len(tables)
    for t in tables:
        assert set(t[0]) == {0, 1} and set(t[1]) == {0, 1, 2}


def test_sample_on_support_and_deterministic():
    m = (3, 3)
    theta = BlockParams(1.0, (np.full(3, 1 / 3),) * 2,
                        MaxDepParams(np.array([0.2, 0.3, 0.5]), (np.array([2, 0, 1]),)))
    part = BlockPartition.from_lists([[[0, 1]]], m)
    model = CcmModel(1, part, np.array([1.0]), ((theta,),), m)
    data, z, y = sample(model, 500, np.random.default_rng(1))
    x = data.x0
    assert np.array_equal(np.array([2, 0, 1])[x[:, 0]], x[:, 1])
    assert y[0][0].all()
    again, _, _ = sample(model, 500, np.random.default_rng(1))
    assert np.array_equal(data.codes, again.codes)


def test_sample_frequency_matches_tau():
    m = (4, 3)
    theta = BlockParams(1.0, (np.full(4, 0.25), np.full(3, 1 / 3)), FIG2A)
    model = CcmModel(1, BlockPartition.from_lists([[[0, 1]]], m), np.array([1.0]), ((theta,),), m)
    data, _, _ = sample(model, 100_000, np.random.default_rng(2))
    freq = np.mean((data.codes[:, 0] == 1) & (data.codes[:, 1] == 1))
    assert abs(freq - 0.1) < 0.01


def test_sample_cell_frequencies_within_three_sigma(rng):
    m = (3, 2, 2)
    model = random_model(rng, 2, m)
    n = 200_000
    data, _, _ = sample(model, n, rng)
    cells = enumerate_cells(m)
    p = np.exp(mixture_logpdf_rows(cells, model))
    flat = np.ravel_multi_index(data.x0.T, m)
    freq = np.bincount(flat, minlength=len(cells)) / n
    assert np.all(np.abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / n) + 1e-4)


def test_model_json_round_trip_is_byte_stable(tmp_path, rng):
    model = random_model(rng, 2, (3, 2, 2, 4))
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    write_model(p1, model)
    back = read_model(p1)
    write_model(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    cells = enumerate_cells(model.modality_counts)
    assert np.allclose(mixture_logpdf_rows(cells, model), mixture_logpdf_rows(cells, back))


def test_zero_rho_block_omits_dependency_parameters(rng):
    m = (2, 2)
    theta = random_block_params(m, rng)
    theta = BlockParams(0.0, theta.alpha, theta.maxdep)
    model = CcmModel(1, BlockPartition.from_lists([[[0, 1]]], m), np.array([1.0]), ((theta,),), m)
    entry = json.loads(dumps_model(model))["blocks"][0]
    assert "tau" not in entry and "delta_images" not in entry
    back = model_from_json(json.loads(dumps_model(model)))
    assert back.blocks[0][0].rho == 0.0
