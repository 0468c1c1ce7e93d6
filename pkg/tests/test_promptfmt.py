import re
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import grid_from_rows, open_grid
from oracles import exact_largest_remainder
from navfuse.gridworld import Episode, Pose, observe
from navfuse.promptfmt import (
    CLAUSE_NAMES,
    PLACEHOLDERS,
    DistributionParseError,
    PromptTemplate,
    extract_tag,
    history_summary,
    parse_distribution,
    render_patch_text,
    render_prompt,
    round_hundredths,
    serialize_distribution,
)

GOLDEN = Path(__file__).parent / "golden"

EXAMPLE_SENTENCE = (
    "Stop with probability 0.03, move forward with probability 0.44, turn left with probability 0.28, "
    "turn right with probability 0.21, look up with probability 0.03, and look down with probability 0.01"
)
OUTPUT_SENTENCE = (
    "Stop with probability 0.03, move forward with probability 0.55, turn left with probability 0.38, "
    "turn right with probability 0.00, look up with probability 0.03, and look down with probability 0.01"
)
PROMPT_SENTENCE = (
    "Imagine you are a robot, and you are navigating to find <Goal><GoalHere></Goal>. With current observation "
    "<Img><ImageHere></Img>, history tokens <History><HistoryHere></History>, and suggested actions "
    "probabilities <ActionProb><ActionProbHere></ActionProb>, please plan out your following action."
)

distributions = st.lists(st.floats(0.0, 1.0), min_size=6, max_size=6).filter(lambda v: sum(v) > 1e-3).map(
    lambda v: np.array(v) / sum(v))


def _values(text):
    return [float(v) for v in re.findall(r"probability (\d\.\d\d)", text)]


def test_serialize_reproduces_example_sentence():
    assert serialize_distribution([0.03, 0.44, 0.28, 0.21, 0.03, 0.01]) == EXAMPLE_SENTENCE


def test_parse_output_sentence():
    assert np.allclose(parse_distribution(OUTPUT_SENTENCE), [0.03, 0.55, 0.38, 0.0, 0.03, 0.01], atol=1e-12)


def test_onehot_stop():
    text = serialize_distribution(np.eye(6)[0])
    assert text.startswith("Stop with probability 1.00, move forward with probability 0.00, ")


def test_uniform_split_by_index():
    assert round_hundredths([1 / 6] * 6) == [17, 17, 17, 17, 16, 16]
    assert _values(serialize_distribution([1 / 6] * 6)) == [0.17, 0.17, 0.17, 0.17, 0.16, 0.16]


@settings(max_examples=500)
@given(distributions)
def test_rounding_matches_exact_oracle(d):
    units = round_hundredths(d)
    assert sum(units) == 100
    assert units == exact_largest_remainder(list(d))


def test_round_trip_thousand_samples():
    rng = np.random.default_rng(0)
    for k in range(1000):
        alpha = [0.2, 1.0, 5.0][k % 3]
        d = rng.dirichlet(np.full(6, alpha))
        text = serialize_distribution(d)
        assert sum(round(v * 100) for v in _values(text)) == 100
        back = parse_distribution(text)
        assert np.abs(back - d).max() <= 0.01


@given(distributions, st.permutations(range(6)))
def test_clause_order_does_not_matter(d, order):
    clauses = serialize_distribution(d).replace(", and ", ", ").split(", ")
    shuffled = ", ".join(clauses[i] for i in order)
    assert np.array_equal(parse_distribution(shuffled), parse_distribution(serialize_distribution(d)))


def test_parser_is_lenient_on_form():
    text = "  STOP   with probability 0.03,move forward with probability 0.55 and TURN LEFT with probability 0.38, " \
           "turn right with probability 0, look up with probability .03, look down with probability 0.01.  "
    assert np.allclose(parse_distribution(text), [0.03, 0.55, 0.38, 0.0, 0.03, 0.01])


def test_parser_clamps_negatives_and_renormalises():
    text = OUTPUT_SENTENCE.replace("turn right with probability 0.00", "turn right with probability -0.02")
    out = parse_distribution(text)
    assert out[3] == 0.0 and abs(out.sum() - 1.0) < 1e-12
    text = OUTPUT_SENTENCE.replace("0.55", "0.58")
    assert parse_distribution(text)[1] == pytest.approx(0.58 / 1.03)


@pytest.mark.parametrize(
    "text, kind",
    [
        ("Stop with probability 0.9", "missing clause"),
        (OUTPUT_SENTENCE + ", Stop with probability 0.1", "duplicate clause"),
        (OUTPUT_SENTENCE.replace("0.55", "lots"), "non-numeric value"),
        (OUTPUT_SENTENCE.replace("0.55", "0.75"), "bad sum"),
        (OUTPUT_SENTENCE.replace("turn left", "spin"), "unrecognized clause"),
        ("", "missing clause"),
    ],
)
def test_parse_errors_name_the_defect(text, kind):
    with pytest.raises(DistributionParseError) as err:
        parse_distribution(text)
    assert err.value.kind == kind


def test_missing_clause_message():
    with pytest.raises(DistributionParseError, match="missing clause: move forward"):
        parse_distribution("Stop with probability 0.9")


def test_serialize_rejects_invalid_input():
    with pytest.raises(ValueError):
        serialize_distribution([0.5, 0.5])
    with pytest.raises(ValueError):
        serialize_distribution([np.nan, 1, 0, 0, 0, 0])


def test_default_template_has_five_variants_and_verbatim_first():
    t = PromptTemplate.default()
    assert len(t.variants) == 5
    assert t.variants[0] == PROMPT_SENTENCE
    assert len(set(t.variants)) == 5


def test_template_validation():
    with pytest.raises(ValueError):
        PromptTemplate(())
    with pytest.raises(ValueError, match="<HistoryHere>"):
        PromptTemplate((PROMPT_SENTENCE.replace("<HistoryHere>", ""),))
    with pytest.raises(ValueError):
        PromptTemplate((PROMPT_SENTENCE + " <GoalHere>",))
    other = PromptTemplate.default().variants[1]
    parsed = PromptTemplate.parse(PROMPT_SENTENCE + "\n---\n\n" + other + "\n---\n")
    assert parsed.variants == (PROMPT_SENTENCE, other)


def _corridor_obs():
    grid = grid_from_rows(["#######", "#.....#", "#######"], {"chair": [(5, 1)]})
    ep = Episode("c", "", Pose.at_cell((3, 1), 0), "chair", 0.5, grid)
    return observe(grid, ep.start, ep, None, False)


def test_patch_text_matches_golden_corridor():
    assert render_patch_text(_corridor_obs()) + "\n" == (GOLDEN / "corridor_patch.txt").read_text()


def test_patch_text_open_room():
    grid = open_grid(30, 30)
    ep = Episode("o", "", Pose.at_cell((15, 15), 0), "chair", 2.0, grid)
    text = render_patch_text(observe(grid, ep.start, ep, None, False))
    lines = text.splitlines()
    assert len(lines) == 12
    assert all(line == "." * 11 for i, line in enumerate(lines[:11]) if i != 5)
    assert lines[5] == "....." + "@" + "....."
    assert text == render_patch_text(observe(grid, ep.start, ep, None, False))


@pytest.mark.parametrize("variant", range(5))
def test_render_prompt_fills_every_tag(variant):
    obs = _corridor_obs()
    d = [0.03, 0.44, 0.28, 0.21, 0.03, 0.01]
    text = render_prompt("toilet", obs, "no actions taken yet", d, variant)
    assert not any(ph in text for ph in PLACEHOLDERS)
    assert extract_tag(text, "Goal") == "toilet"
    assert extract_tag(text, "ActionProb") == EXAMPLE_SENTENCE
    assert extract_tag(text, "Img") == render_patch_text(obs)
    assert extract_tag(text, "History") == "no actions taken yet"


def test_render_prompt_goal_index_and_bad_variant():
    obs = _corridor_obs()
    text = render_prompt(0, obs, "h", np.full(6, 1 / 6))
    assert extract_tag(text, "Goal") == "chair"
    with pytest.raises(IndexError):
        render_prompt("chair", obs, "h", np.full(6, 1 / 6), 5)


def test_history_summary():
    assert history_summary([], 0) == "no actions taken yet"
    text = history_summary([1, 1, 2, 3, 1, 1, 0], 2)
    assert text.startswith("7 actions taken")
    assert "turn left, turn right, move forward, move forward, stop" in text
    assert text.endswith("2 collisions")


def test_clause_names_in_action_order():
    assert CLAUSE_NAMES == ("Stop", "move forward", "turn left", "turn right", "look up", "look down")
