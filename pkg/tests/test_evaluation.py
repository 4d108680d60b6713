import numpy as np
import pytest

from avforge.dataset import PreferenceRecord, Responses
from avforge.evaluation import (ScoringFailedException, annotation_confusion, cohen_kappa, dominant_level,
                                judge_accuracy, preference_accuracy, with_instruction)
from avforge.remote import RemoteFailedException
from avforge.scorer import TinyLM, TinyLMScorer
from avforge.testing.fixtures import toy_records, with_head_bias, zero_model
from avforge.testing.stubs import StubJudge, StubScorer


def _record(i, domain="medical"):
    return PreferenceRecord(
        id=f"s{i}",
        domain=domain,
        query=f"Q{i}",
        responses=Responses(expert=f"e{i}", generic=f"g{i}", avoidance=f"a{i}"),
    )


def _table(winners):
    """Stub scores making record i won by winners[i]."""
    table = {}
    for i, winner in enumerate(winners):
        table.update({f"e{i}": -3.0, f"g{i}": -3.0, f"a{i}": -3.0})
        table[{"exp": f"e{i}", "gen": f"g{i}", "avd": f"a{i}"}[winner]] = -1.0
    return table


def test_preference_accuracy_fractions():
    winners = ["exp"] * 5 + ["gen"] * 3 + ["avd"] * 2
    records = [_record(i) for i in range(10)]
    report = preference_accuracy(StubScorer(_table(winners)), records, workers=2)
    assert report.domain == "medical"
    assert report.n_samples == 10
    assert (report.fractions.exp, report.fractions.gen, report.fractions.avd) == (0.5, 0.3, 0.2)
    assert report.dominant == "exp"
    assert [s.winner for s in report.per_sample] == winners
    assert report.mean_logprobs.exp == pytest.approx((5 * -1.0 + 5 * -3.0) / 10)


def test_constant_expert_preference():
    records = [_record(i) for i in range(4)]
    report = preference_accuracy(StubScorer(_table(["exp"] * 4)), records)
    assert report.fractions.exp == 1.0
    assert report.dominant == "exp"


def test_ties_prefer_expert_then_generic():
    records = [_record(0), _record(1)]
    table = {"e0": -1.0, "g0": -1.0, "a0": -1.0, "e1": -2.0, "g1": -1.0, "a1": -1.0}
    report = preference_accuracy(StubScorer(table), records)
    assert [s.winner for s in report.per_sample] == ["exp", "gen"]


def test_scoring_failure_names_sample():
    records = [_record(i) for i in range(3)]
    scorer = StubScorer(_table(["exp"] * 3), failing={"g1"})
    with pytest.raises(ScoringFailedException) as excinfo:
        preference_accuracy(scorer, records)
    assert excinfo.value.sample_id == "s1"


def test_empty_dataset():
    with pytest.raises(ValueError):
        preference_accuracy(StubScorer({}), [])


def test_mixed_domains_are_labelled():
    records = [_record(0, "medical"), _record(1, "legal")]
    assert preference_accuracy(StubScorer(_table(["exp", "avd"])), records).domain == "mixed"


def test_instruction_baseline():
    records = [_record(0)]
    instruction = "Answer like a doctor."
    prompt = with_instruction("Q0", instruction)
    assert prompt == "Answer like a doctor.\n\nQ0"
    table = {(prompt, "e0"): -1.0, "e0": -5.0, "g0": -2.0, "a0": -3.0}
    assert preference_accuracy(StubScorer(table), records).per_sample[0].winner == "gen"
    assert preference_accuracy(StubScorer(table), records, instruction=instruction).per_sample[0].winner == "exp"


def test_preference_accuracy_on_tiny_model(base, records):
    report = preference_accuracy(TinyLMScorer.from_weights(base), records["legal"])
    assert report.fractions.gen == 1.0
    assert report.dominant == "gen"


@pytest.mark.parametrize(
    "fractions, expected",
    [
        ({"exp": 0.5, "gen": 0.3, "avd": 0.2}, "exp"),
        ({"exp": 0.0, "gen": 0.0, "avd": 1.0}, "avd"),
        ({"exp": 0.34, "gen": 0.33, "avd": 0.33}, "exp"),
        ({"exp": 0.4, "gen": 0.4, "avd": 0.2}, "none"),
        ({"exp": 1 / 3, "gen": 1 / 3, "avd": 1 / 3}, "none"),
        ({"exp": 1 / 3, "gen": 0.3, "avd": 0.3}, "none"),
    ],
)
def test_dominant_level(fractions, expected):
    assert dominant_level(fractions) == expected


def test_kappa_perfect_agreement():
    labels = ["exp", "gen", "avd", "exp"]
    assert cohen_kappa(labels, labels) == 1.0
    assert cohen_kappa(["exp"] * 5, ["exp"] * 5) == 1.0


def test_kappa_partial_agreement():
    a = ["exp", "exp", "gen", "avd"]
    b = ["exp", "gen", "gen", "avd"]
    # p_o = 3/4, p_e = (2*1 + 1*2 + 1*1) / 16
    assert cohen_kappa(a, b) == pytest.approx(0.6364, abs=1e-4)
    assert cohen_kappa(a, b) == cohen_kappa(b, a)


def test_kappa_complete_disagreement():
    assert cohen_kappa(["exp", "gen"], ["gen", "exp"]) == pytest.approx(-1.0)


def test_kappa_of_independent_annotators():
    rng = np.random.default_rng(0)
    a = rng.choice(["exp", "gen", "avd"], size=10000)
    b = rng.choice(["exp", "gen", "avd"], size=10000)
    assert abs(cohen_kappa(a, b)) < 0.05


def test_kappa_invalid_input():
    with pytest.raises(ValueError):
        cohen_kappa(["exp"], ["exp", "gen"])
    with pytest.raises(ValueError):
        cohen_kappa([], [])


def test_annotation_confusion():
    confusion = annotation_confusion(["exp", "exp", "gen", "avd"], ["exp", "gen", "gen", "exp"])
    assert confusion["exp"] == {"exp": 0.5, "gen": 0.5, "avd": 0.0}
    assert confusion["gen"] == {"exp": 0.0, "gen": 1.0, "avd": 0.0}
    assert confusion["avd"] == {"exp": 1.0, "gen": 0.0, "avd": 0.0}
    with pytest.raises(ValueError):
        annotation_confusion(["exp"], [])


@pytest.fixture
def x_model(config):
    # Greedy decoding of this model always emits "x"
    return TinyLM(with_head_bias(zero_model(config), {"x": 3.0}))


def test_judge_accuracy(x_model):
    judge = StubJudge("expert")
    report = judge_accuracy(judge, x_model, toy_records("medical", n=4), max_new_tokens=4)
    assert (report.n, report.n_judged, report.n_errors) == (4, 4, 0)
    assert report.fractions.expert == 1.0
    assert judge.calls[0] == ("Q0", "xxxx", ("expert", "generic", "avoidance"))


def test_judge_unknown_label_is_an_error(x_model):
    report = judge_accuracy(StubJudge("meh"), x_model, toy_records("medical", n=3), max_new_tokens=2)
    assert (report.n_judged, report.n_errors) == (0, 3)
    assert (report.fractions.expert, report.fractions.generic, report.fractions.avoidance) == (0.0, 0.0, 0.0)
    assert report.samples[0].error == "unknown label 'meh'"


def test_judge_failures_are_recorded(x_model):
    judge = StubJudge(error=RemoteFailedException("judge down"))
    report = judge_accuracy(judge, x_model, toy_records("legal", n=2), max_new_tokens=2)
    assert report.n_errors == 2
    assert all(sample.error == "judge down" for sample in report.samples)


def test_judge_records_generation_failures(x_model):
    records = toy_records("medical", n=2)
    records.append(records[0].model_copy(update={"id": "long", "query": "q" * 100}))
    judge = StubJudge("expert")
    report = judge_accuracy(judge, x_model, records, max_new_tokens=2)
    assert (report.n, report.n_judged, report.n_errors) == (3, 2, 1)
    assert report.fractions.expert == 1.0
    assert len(judge.calls) == 2
    assert report.samples[2].sample_id == "long"
    assert "at most 64" in report.samples[2].error
