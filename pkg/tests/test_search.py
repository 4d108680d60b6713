import itertools

import numpy as np
import pytest
from pydantic import ValidationError

from avforge.evaluation import preference_accuracy
from avforge.scorer import TinyLMScorer
from avforge.search import (CoefficientGrid, CostModel, SearchException, SearchJournal, TargetSpec, coefficient_range,
                            estimate_cost, evaluate_cell, grid_search, parse_grid, plan_grid, sweep_lambda)
from avforge.tensor_store import load_checkpoint
from avforge.testing.fixtures import toy_records

HALVES = [-1.0, -0.5, 0.0, 0.5, 1.0]


class CountingFactory:
    def __init__(self):
        self.calls = 0

    def __call__(self, weights):
        self.calls += 1
        return TinyLMScorer.from_weights(weights)


def _expected_dominant(coefficient):
    if coefficient <= -0.3:
        return "avd"
    if coefficient >= 0.3:
        return "exp"
    return "gen"


def test_coefficient_range():
    values = coefficient_range(-1, 1, 0.1)
    assert len(values) == 21
    assert values[0] == -1.0 and values[10] == 0.0 and values[-1] == 1.0
    assert values[3] == -0.7
    assert coefficient_range(0, 0, 1) == [0.0]
    assert coefficient_range(0, 1, 0.3) == [0.0, 0.3, 0.6, 0.9]
    for args in [(0, 1, 0), (0, 1, -0.1), (1, 0, 0.1), (0, float("inf"), 0.1)]:
        with pytest.raises(ValueError):
            coefficient_range(*args)


def test_parse_grid():
    assert parse_grid("-1:1:0.5") == HALVES
    for text in ("1:2", "a:b:c", "0:1:0"):
        with pytest.raises(ValueError):
            parse_grid(text)


def test_grid_validation():
    with pytest.raises(ValidationError):
        CoefficientGrid(values={})
    with pytest.raises(ValidationError):
        CoefficientGrid(values={"medical": []})
    with pytest.raises(ValidationError):
        CoefficientGrid(values={"medical": [0.5, 0.0]})
    with pytest.raises(ValidationError):
        CoefficientGrid(values={"medical": [0.0, float("nan")]})


def test_plan_grid():
    plan = plan_grid(CoefficientGrid.default(["medical", "financial", "legal"]))
    assert plan.sizes == [21, 21, 21]
    assert plan.cell_count == 9261
    plan = plan_grid(CoefficientGrid(values={"a": [0.0, 1.0], "b": [0.0, 1.0, 2.0]}))
    assert plan.cell_count == 6
    assert list(plan.cells()) == [(0.0, 0.0), (0.0, 1.0), (0.0, 2.0), (1.0, 0.0), (1.0, 1.0), (1.0, 2.0)]


def test_estimate_cost():
    report = estimate_cost()
    assert report.joint_training_runs == 27
    assert report.av_training_runs == 3
    assert report.training_reduction == 9.0
    assert report.joint_hours == 1944.0
    assert report.av_training_hours == 216.0
    assert report.cell_count == 9261
    assert report.search_hours == pytest.approx(154.35)
    assert report.speedup == pytest.approx(1944 / 154.35)


def test_estimate_cost_with_grid():
    grid = CoefficientGrid(values={"a": HALVES, "b": HALVES})
    report = estimate_cost(CostModel(p=2, D=2, train_hours_per_run=10, eval_seconds_per_cell=36), grid)
    assert (report.joint_training_runs, report.av_training_runs, report.cell_count) == (4, 2, 25)
    assert report.search_hours == pytest.approx(0.25)
    with pytest.raises(ValidationError):
        CostModel(D=0)


def test_sweep_transitions(base, avs, records):
    grid = coefficient_range(-1, 1, 0.1)
    report = sweep_lambda(base, avs["medical"], grid, records["medical"], CountingFactory())
    assert report.domain == "medical"
    assert [row.coefficient for row in report.rows] == grid
    for row in report.rows:
        assert row.dominant == _expected_dominant(row.coefficient)
        assert getattr(row.fractions, row.dominant) == 1.0
    # The expert margin grows with the coefficient
    margins = [row.mean_logprobs.exp - row.mean_logprobs.avd for row in report.rows]
    assert all(b > a for a, b in zip(margins[:-1], margins[1:]))


def test_sweep_at_zero_is_base_evaluation(base, avs, records):
    report = sweep_lambda(base, avs["legal"], [0.0], records["legal"], CountingFactory())
    expected = preference_accuracy(TinyLMScorer.from_weights(base), records["legal"])
    assert report.rows[0].fractions == expected.fractions
    assert report.rows[0].mean_logprobs == expected.mean_logprobs


def test_sweep_keeps_merged_checkpoints(tmp_path, base, avs, records):
    sweep_lambda(base, avs["medical"], [-0.5, 0.5], records["medical"], CountingFactory(), keep_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["medical_+0.50.safetensors", "medical_-0.50.safetensors"]
    kept = load_checkpoint(tmp_path / "medical_+0.50.safetensors")
    assert kept["head.bias"].to_float32()[ord("A")] == 1.0


def test_sweep_failure_names_coefficient(base, avs, records):
    def failing_factory(weights):
        raise RuntimeError("out of memory")

    with pytest.raises(SearchException) as excinfo:
        sweep_lambda(base, avs["medical"], [0.5], records["medical"], failing_factory)
    assert excinfo.value.cell == (0.5,)


def test_sweep_to_dataset(base, avs, records):
    report = sweep_lambda(base, avs["financial"], [-0.5, 0.0, 0.5], records["financial"], CountingFactory())
    dataset = report.to_dataset()
    assert dataset.attrs["domain"] == "financial"
    assert dataset.fraction.dims == ("coefficient", "level")
    np.testing.assert_array_equal(dataset.coefficient.values, [-0.5, 0.0, 0.5])
    np.testing.assert_array_equal(dataset.fraction.sel(level="avd").values, [1.0, 0.0, 0.0])
    assert list(dataset.dominant.values) == ["avd", "gen", "exp"]


def test_sweep_resumes_from_journal(tmp_path, base, avs, records):
    grid = coefficient_range(-1, 1, 0.25)
    full = SearchJournal(tmp_path / "full.jsonl")
    reference = sweep_lambda(base, avs["medical"], grid, records["medical"], CountingFactory(), journal=full)

    # Three complete lines and a fourth cut off mid-write
    lines = (tmp_path / "full.jsonl").read_text().splitlines(keepends=True)
    assert len(lines) == len(grid)
    partial = tmp_path / "partial.jsonl"
    partial.write_text("".join(lines[:3]) + lines[3][: len(lines[3]) // 2])

    factory = CountingFactory()
    resumed = sweep_lambda(base, avs["medical"], grid, records["medical"], factory, journal=SearchJournal(partial))
    assert factory.calls == len(grid) - 3
    assert resumed == reference
    assert len(SearchJournal(partial).load()) == len(grid)


def test_corrupt_journal(tmp_path):
    path = tmp_path / "journal.jsonl"
    path.write_text('{"cell": [0.0], "fractions": {}}\nnot json\n{"cell": [1.0], "fractions": {}}\n')
    with pytest.raises(SearchException):
        SearchJournal(path).load()


def test_exhaustive_search(base, avs, records):
    grid = CoefficientGrid(values={domain: HALVES for domain in avs})
    targets = TargetSpec(targets={"medical": "avd", "financial": "avd", "legal": "exp"})
    result = grid_search(base, avs, grid, targets, records, CountingFactory(), workers=2)
    assert result.mode == "exhaustive"
    assert len(result.cells) == 125
    assert [tuple(c.cell) for c in result.cells] == list(itertools.product(HALVES, HALVES, HALVES))
    assert sorted(map(tuple, result.satisfying)) == sorted(
        itertools.product([-1.0, -0.5], [-1.0, -0.5], [0.5, 1.0])
    )
    assert result.best is not None
    assert result.best.objective == 3.0
    assert result.best.cell == [-1.0, -1.0, 0.5]

    # Every reported cell agrees with a direct evaluation
    direct = evaluate_cell(base, avs, result.best.cell, records, CountingFactory(), targets.targets)
    assert direct == result.best

    refiltered = result.refilter({"medical": "gen", "financial": "exp", "legal": "gen"})
    assert sorted(map(tuple, refiltered.satisfying)) == [(0.0, 0.5, 0.0), (0.0, 1.0, 0.0)]


def test_hierarchical_search_is_sound(base, avs, records):
    domains = ["medical", "legal"]
    grid = CoefficientGrid.default(domains)
    targets = {"medical": "avd", "legal": "exp"}
    vectors = {domain: avs[domain] for domain in domains}
    datasets = {domain: records[domain] for domain in domains}
    result = grid_search(base, vectors, grid, targets, datasets, CountingFactory(), mode="hierarchical")

    cells = [tuple(c.cell) for c in result.cells]
    assert len(cells) == len(set(cells))
    # Coarse grid first
    assert cells[:36] == list(itertools.product(coefficient_range(-1, 1, 0.4), repeat=2))
    assert len(cells) < plan_grid(grid).cell_count
    assert len(result.satisfying) > 0
    for medical, legal in result.satisfying:
        assert _expected_dominant(medical) == "avd"
        assert _expected_dominant(legal) == "exp"
        assert medical in grid.values["medical"] and legal in grid.values["legal"]

    dataset = result.to_dataset()
    assert dataset.satisfied.dims == ("coefficient_medical", "coefficient_legal")
    assert set(np.unique(dataset.satisfied.values)) <= {-1, 0, 1}
    assert int((dataset.satisfied.values >= 0).sum()) == len(cells)


def test_search_resumes_from_journal(tmp_path, base, avs, records):
    domains = ["medical", "legal"]
    grid = CoefficientGrid(values={domain: HALVES for domain in domains})
    vectors = {domain: avs[domain] for domain in domains}
    datasets = {domain: records[domain] for domain in domains}
    targets = {"medical": "avd", "legal": "exp"}
    journal = SearchJournal(tmp_path / "search.jsonl")

    first = grid_search(base, vectors, grid, targets, datasets, CountingFactory(), journal=journal)
    factory = CountingFactory()
    second = grid_search(base, vectors, grid, targets, datasets, factory, journal=journal)
    assert factory.calls == 0
    assert second == first
    assert all(entry.satisfied is not None for entry in journal.load())


def test_search_failure_names_cell(base, avs, records):
    def failing_factory(weights):
        raise RuntimeError("scorer crashed")

    grid = CoefficientGrid(values={"medical": [0.5]})
    with pytest.raises(SearchException) as excinfo:
        grid_search(base, {"medical": avs["medical"]}, grid, {"medical": "exp"},
                    {"medical": records["medical"]}, failing_factory)
    assert excinfo.value.cell == (0.5,)


def test_search_argument_errors(base, avs, records):
    grid = CoefficientGrid(values={"medical": [0.0]})
    vectors = {"medical": avs["medical"]}
    datasets = {"medical": records["medical"]}
    with pytest.raises(ValueError):
        grid_search(base, avs, grid, {"medical": "exp"}, datasets, CountingFactory())
    with pytest.raises(ValueError):
        grid_search(base, vectors, grid, {"medical": "exp"}, datasets, CountingFactory(), mode="random")
    with pytest.raises(ValueError):
        grid_search(base, vectors, grid, {"medical": "best"}, datasets, CountingFactory())
    with pytest.raises(ValueError):
        grid_search(base, vectors, grid, {"legal": "exp"}, datasets, CountingFactory())
    with pytest.raises(ValueError):
        evaluate_cell(base, vectors, [0.0, 1.0], datasets, CountingFactory(), {"medical": "exp"})


def test_records_of_other_domains_do_not_move(base, avs):
    # Vectors touch disjoint bytes, so a legal dataset ignores the medical coefficient
    report = sweep_lambda(base, avs["medical"], [-1.0, 1.0], toy_records("legal"), CountingFactory())
    assert [row.dominant for row in report.rows] == ["gen", "gen"]
