import json
import re

import pytest

from ccmix import cli
from ccmix.bench import SimScenario, kl_divergence
from ccmix.datasets import dentist_path
from ccmix.estim import EstimationError
from ccmix.model import BlockPartition, nu_cim, read_model, write_model

from conftest import random_model


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr().out if capsys else ""
    return code, out


@pytest.fixture
def small_csv(tmp_path):
    p = tmp_path / "small.csv"
    code = cli.main(["simulate", "--scenario", '{"d": 4, "u": 0.2}', "--n", "300", "--seed", "1",
                     "--out", str(p), "--no-manifest"])
    assert code == 0
    return p


def test_fit_singletons_reports_cim_parameter_count(tmp_path, small_csv, capsys):
    out = tmp_path / "m.json"
    code, text = run(["fit", small_csv, "--g", 2, "--sigma", "[[1],[2],[3],[4]]", "--out", out,
                      "--starts", 2], capsys)
    assert code == 0
    assert f"nu={nu_cim(2, (3, 3, 3, 3))}" in text
    model = read_model(out)
    assert model.partition == BlockPartition.singletons(2, 4)
    assert (tmp_path / "m.json.manifest.json").exists()


def test_fit_search_is_deterministic(tmp_path, small_csv):
    paths = []
    for tag in ("a", "b"):
        m, s = tmp_path / f"{tag}.json", tmp_path / f"{tag}.svg"
        assert cli.main(["fit", str(small_csv), "--g", "2", "--chains", "1", "--qmax", "2",
                         "--seed", "5", "--out", str(m), "--svg", str(s)]) == 0
        paths.append((m, s))
    assert paths[0][0].read_bytes() == paths[1][0].read_bytes()
    assert paths[0][1].read_bytes() == paths[1][1].read_bytes()


def test_replay_reproduces_outputs(tmp_path, small_csv):
    m = tmp_path / "r.json"
    assert cli.main(["fit", str(small_csv), "--g", "1", "--chains", "1", "--qmax", "1",
                     "--out", str(m)]) == 0
    first = m.read_bytes()
    m.unlink()
    assert cli.main(["replay", str(tmp_path / "r.json.manifest.json")]) == 0
    assert m.read_bytes() == first


def test_select_report_rows_ordered_by_g(tmp_path, small_csv, capsys):
    rep = tmp_path / "rep.json"
    code, text = run(["select", small_csv, "--g-max", 2, "--chains", 1, "--qmax", 1,
                      "--out", tmp_path / "best.json", "--report", rep], capsys)
    assert code == 0
    rows = [line.split("\t") for line in text.splitlines()[1:] if re.match(r"^\d+\t", line)]
    assert [int(r[0]) for r in rows] == [1, 2]
    report = json.loads(rep.read_text())
    assert [r["g"] for r in report["per_g"]] == [1, 2]
    assert re.search(r"best g=\d", text)


def test_simulate_empty_and_reproducible(tmp_path):
    empty = tmp_path / "e.csv"
    assert cli.main(["simulate", "--scenario", '{"d": 4}', "--n", "0", "--out", str(empty)]) == 0
    assert empty.read_text() == "V1,V2,V3,V4\n"
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert cli.main(["simulate", "--scenario", '{"d": 4, "u": 0.5}', "--n", "50", "--seed", "3",
                         "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    truth = json.loads((tmp_path / "a.csv.truth.json").read_text())
    assert len(truth["labels"]) == 50 and set(truth["labels"]) <= {1, 2}


def test_simulate_then_fit_true_structure_has_small_kl(tmp_path):
    truth = SimScenario(4, 0.3).model()
    mp = tmp_path / "truth.json"
    write_model(mp, truth)
    data = tmp_path / "d.csv"
    assert cli.main(["simulate", "--model", str(mp), "--n", "3000", "--seed", "2",
                     "--out", str(data), "--no-manifest"]) == 0
    est = tmp_path / "est.json"
    assert cli.main(["fit", str(data), "--g", "2", "--sigma", "[[1,2],[3,4]]", "--out", str(est),
                     "--r-max", "100", "--no-manifest"]) == 0
    assert kl_divergence(truth, read_model(est)) < 0.3


def svg_bands(svg):
    return [float(h) for h in re.findall(r'<rect x="0" y="[^"]+" width="\d+" height="([^"]+)"', svg)]


def test_summarize_geometry_and_determinism(tmp_path, rng):
    model = random_model(rng, 3, (3, 2, 2, 4))
    mp = tmp_path / "m.json"
    write_model(mp, model)
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    assert cli.main(["summarize", str(mp), "--out", str(a)]) == 0
    assert cli.main(["summarize", str(mp), "--out", str(b)]) == 0
    svg = a.read_text()
    assert svg == b.read_text()
    bands = svg_bands(svg)
    assert len(bands) == 3 and abs(sum(bands) - cli.SVG_HEIGHT) <= 0.5
    assert bands == sorted(bands, reverse=True)


def test_summary_of_single_class_independence_model(rng):
    m = (2, 3, 2)
    model = random_model(rng, 1, m, BlockPartition.singletons(1, 3))
    svg = cli.summary_svg(model)
    assert svg_bands(svg) == [cli.SVG_HEIGHT]
    assert 'class="rho"' not in svg and 'class="tau"' not in svg
    # one filled membership cell per singleton row
    assert len(re.findall(r'class="cell"[^>]*fill="black"', svg)) == 3


def test_rho_bar_is_linear_in_rho():
    model = SimScenario(4, 0.5).model()
    svg = cli.summary_svg(model)
    widths = {float(w) for w in re.findall(r'class="rho" x="[^"]+" y="[^"]+" width="([^"]+)"', svg)}
    assert widths == {round(cli.RHO_W * 0.3, 2)}


def test_exit_codes(tmp_path, small_csv, monkeypatch, capsys):
    assert cli.main(["fit", str(tmp_path / "missing.csv"), "--g", "1"]) == 2
    assert cli.main(["fit", str(small_csv), "--g", "1", "--sigma", "[[1,2],[2,3,4]]",
                     "--out", str(tmp_path / "x.json")]) == 2
    assert cli.main(["fit", str(small_csv), "--g", "1", "--sigma", "not json"]) == 2
    assert cli.main(["fit", str(small_csv)]) == 2
    assert cli.main(["simulate", "--n", "5", "--out", str(tmp_path / "s.csv")]) == 2
    assert cli.main(["replay", str(tmp_path / "none.json")]) == 2

    def numeric(*a, **k):
        raise EstimationError("boom")

    monkeypatch.setattr(cli, "initial_fit", numeric)
    assert cli.main(["fit", str(small_csv), "--g", "1", "--sigma", "[[1],[2],[3],[4]]",
                     "--out", str(tmp_path / "y.json")]) == 3

    def broken(*a, **k):
        raise AssertionError("invariant")

    monkeypatch.setattr(cli, "initial_fit", broken)
    assert cli.main(["fit", str(small_csv), "--g", "1", "--sigma", "[[1],[2],[3],[4]]",
                     "--out", str(tmp_path / "z.json")]) == 4
    capsys.readouterr()


def test_parse_sigma_forms():
    m = (2, 2, 2)
    one = cli.parse_sigma("[[1,2],[3]]", 2, m)
    assert one.to_lists() == [[[1, 2], [3]], [[1, 2], [3]]]
    two = cli.parse_sigma("[[[1,2,3]],[[1],[2],[3]]]", 2, m)
    assert two.to_lists() == [[[1, 2, 3]], [[1], [2], [3]]]
    with pytest.raises(cli.InputError):
        cli.parse_sigma("[[[1,2,3]]]", 2, m)
    with pytest.raises(cli.InputError):
        cli.parse_sigma("[[1,2]]", 1, m)


def test_fit_on_embedded_dentist_table(tmp_path, capsys):
    out = tmp_path / "d.json"
    code, text = run(["fit", dentist_path(), "--g", 3, "--sigma", "[[1],[2],[3],[4],[5]]",
                      "--out", out, "--starts", 5, "--r-max", 300, "--seed", 0], capsys)
    assert code == 0
    bic = float(re.search(r"BIC=(-?[\d.]+)", text).group(1))
    assert abs(bic - (-7481)) <= 5
