import pytest
from hypothesis import given, settings, strategies as st

from conftest import CORPUS_CASES, TEMPLATE_CASES, V_COLS, corpus_text
from semforecast.parsing import (
    FieldSource,
    ParseStatus,
    extract_answer_block,
    parse_sc,
    parse_vsa,
    render_sc_answers,
    render_vsa_answers,
)
from semforecast.prompts import load_template
from semforecast.schema import AgentSemantics, default_answers, schema_for


def _parse(text, kind, n_rows):
    if kind == "SCENE":
        scene, rep = parse_sc(text)
        return scene.answers, rep
    sems, rep = parse_vsa(text, kind, [f"a{j:02d}" for j in range(n_rows)])
    return [s.answers for s in sems], rep


@pytest.mark.parametrize("name,kind,expected", CORPUS_CASES, ids=[c[0] for c in CORPUS_CASES])
def test_corpus_parses_fully(name, kind, expected):
    got, rep = _parse(corpus_text(name), kind, len(expected) if kind != "SCENE" else 0)
    assert rep.status is ParseStatus.FULL
    assert got == expected


@pytest.mark.parametrize("kind,category,expected", TEMPLATE_CASES, ids=[c[0] for c in TEMPLATE_CASES])
def test_template_example_tables_parse(kind, category, expected):
    got, rep = _parse(load_template(kind), category, len(expected))
    assert rep.status is ParseStatus.FULL
    assert got == expected


def test_no_block_gives_all_defaults():
    sems, rep = parse_vsa("I think the car is turning left.", "VEHICLE", ["a", "b", "c"])
    assert len(sems) == 3
    assert all(s.answers == default_answers("VEHICLE") for s in sems)
    assert rep.status is ParseStatus.EMPTY
    assert rep.defaulted_count == 30


def test_lowercase_cell_with_trailing_space():
    text = corpus_text("vehicle_suv_sedan.txt").replace("| BRAKE LIGHTS |", "| brake lights  |", 1)
    sems, rep = parse_vsa(text, "VEHICLE", ["a00", "a01"])
    assert sems[0].answers["Signal"] == "BRAKE LIGHTS"
    assert rep.per_field_source[("a00", "Signal")] is FieldSource.PARSED


def test_closer_variants():
    body = "| Emergency | Type |\n|---|---|\n| YES | BUS |\n"
    for closer in ("</ANSWER>", "<\\ANSWER>", "<ANSWER>"):
        assert extract_answer_block(f"prose <ANSWER>\n{body}{closer} trailing") == f"\n{body}"
    assert extract_answer_block("<ANSWER> never closed") is None
    # the last block wins
    assert extract_answer_block("<ANSWER>one</ANSWER> then <ANSWER>two</ANSWER>") == "two"


def test_partial_scene_answer():
    scene, rep = parse_sc("Reasoning...\nFinal answer: <SUNNY>")
    assert scene.answers == {"Weather": "SUNNY", "TimeOfDay": "UNSURE", "RoadType": "UNSURE", "Intersection": "UNSURE"}
    assert rep.status is ParseStatus.PARTIAL


def test_last_final_answer_line_wins():
    scene, _ = parse_sc("Final answer: <SUNNY> <DAY> <HIGHWAY> <NO>\nfinal ANSWER: <FOGGY> <NIGHT> <OTHER> <YES>")
    assert scene.answers["Weather"] == "FOGGY"


def test_row_count_mismatch():
    text = corpus_text("vehicle_suv_sedan.txt")
    sems, rep = parse_vsa(text, "VEHICLE", ["a", "b", "c"])
    assert sems[2].answers == default_answers("VEHICLE")
    assert rep.status is ParseStatus.PARTIAL
    sems, rep = parse_vsa(text, "VEHICLE", ["a"])
    assert len(sems) == 1 and rep.status is ParseStatus.FULL


def test_short_row_defaults_only_missing_cells():
    text = "<ANSWER>\n| a | b | c |\n|---|---|---|\n| YES | BUS | HAZARD LIGHTS |\n</ANSWER>"
    (s,), rep = parse_vsa(text, "VEHICLE", ["x"])
    assert (s.answers["EmergencyVehicle"], s.answers["VehicleType"], s.answers["Signal"]) == ("YES", "BUS", "HAZARD LIGHTS")
    assert all(s.answers[q] == "UNSURE" for q in V_COLS[3:])
    assert rep.defaulted_count == 7


def test_out_of_vocab_cell_defaults():
    text = corpus_text("vehicle_suv_sedan.txt").replace("| SUV |", "| MINIVAN |", 1)
    sems, rep = parse_vsa(text, "VEHICLE", ["a00", "a01"])
    assert sems[0].answers["VehicleType"] == "OTHER"
    assert rep.per_field_source[("a00", "VehicleType")] is FieldSource.DEFAULTED
    assert any("MINIVAN" in d for d in rep.diagnostics)


def test_precondition_errors():
    with pytest.raises(ValueError):
        parse_vsa("x", "VEHICLE", [])
    with pytest.raises(ValueError):
        parse_vsa("x", "SCENE", ["a"])


def _check_well_formed(sems, rep, category, order):
    assert [s.agent_id for s in sems] == list(order)
    for s in sems:
        for q in schema_for(category):
            src = rep.per_field_source[(s.agent_id, q.question_id)]
            if src is FieldSource.DEFAULTED:
                assert s.answers[q.question_id] == q.default
            else:
                assert s.answers[q.question_id] in q.answers


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=400))
def test_totality_on_arbitrary_bytes(raw):
    sems, rep = parse_vsa(raw, "PEDESTRIAN", ["p0", "p1"])
    _check_well_formed(sems, rep, "PEDESTRIAN", ["p0", "p1"])
    scene, rep = parse_sc(raw)
    assert set(scene.answers) == {q.question_id for q in schema_for("SCENE")}


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_totality_on_mutated_corpus(data):
    name, kind, expected = data.draw(st.sampled_from(CORPUS_CASES[:2]))
    text = corpus_text(name)
    i = data.draw(st.integers(0, len(text)))
    j = data.draw(st.integers(i, len(text)))
    junk = data.draw(st.text(alphabet="|<>-/\\ \nANSWERYESNO", max_size=12))
    order = [f"a{k:02d}" for k in range(len(expected))]
    sems, rep = parse_vsa(text[:i] + junk + text[j:], kind, order)
    _check_well_formed(sems, rep, kind, order)


@pytest.mark.parametrize("name,kind,expected", CORPUS_CASES, ids=[c[0] for c in CORPUS_CASES])
def test_suffix_deletion_is_monotone(name, kind, expected):
    text = corpus_text(name)
    full, _ = _parse(text, kind, len(expected) if kind != "SCENE" else 0)
    full_rows = full if isinstance(full, list) else [full]
    for cut in range(len(text) + 1):
        got, rep = _parse(text[:cut], kind, len(full_rows) if kind != "SCENE" else 0)
        rows = got if isinstance(got, list) else [got]
        for r_full, r_cut in zip(full_rows, rows):
            for q, v in r_cut.items():
                assert v == r_full[q] or v == default_answers(kind)[q]


@given(st.lists(st.fixed_dictionaries({q.question_id: st.sampled_from(q.answers) for q in schema_for("VEHICLE")}),
                min_size=1, max_size=4))
def test_render_parse_idempotent(rows):
    order = [f"v{j}" for j in range(len(rows))]
    sems = [AgentSemantics(a, "VEHICLE", r) for a, r in zip(order, rows)]
    back, rep = parse_vsa(render_vsa_answers(sems), "VEHICLE", order)
    assert [s.answers for s in back] == rows
    assert rep.status is ParseStatus.FULL
    again, _ = parse_vsa(render_vsa_answers(back), "VEHICLE", order)
    assert [s.answers for s in again] == rows


@given(st.fixed_dictionaries({q.question_id: st.sampled_from(q.answers) for q in schema_for("SCENE")}))
def test_scene_render_parse_round_trip(ans):
    from semforecast.schema import SceneSemantics

    scene, rep = parse_sc(render_sc_answers(SceneSemantics(ans)))
    assert scene.answers == ans and rep.status is ParseStatus.FULL
