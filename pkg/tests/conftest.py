from pathlib import Path

import pytest

from semforecast.scene import GeneratorConfig, generate_synthetic

CORPUS = Path(__file__).parent / "corpus"

V_COLS = ("EmergencyVehicle", "VehicleType", "Signal", "KeepForward", "SlowDown", "Turn", "UTurn", "Parked", "Stop",
          "HeavyOcclusion")
P_COLS = ("JayWalking", "Micromobility", "WalkSidewalk", "Cross", "Turn", "Stop", "Waiting", "LowVisibility")


def _rows(cols, *rows):
    return [dict(zip(cols, r.split("|"))) for r in rows]


# (file, kind, expected answers) for every verbatim example generation
CORPUS_CASES = [
    ("vehicle_suv_sedan.txt", "VEHICLE", _rows(
        V_COLS,
        "NO|SUV|BRAKE LIGHTS|NO|YES|UNSURE|NO|NO|UNSURE|NO",
        "NO|SEDAN|NONE|YES|UNSURE|UNSURE|NO|NO|NO|NO",
    )),
    ("pedestrian_scooter.txt", "PEDESTRIAN", _rows(P_COLS, "NO|YES|NO|YES|NO|NO|NO|NO")),
    ("scene_rainy_service.txt", "SCENE", {"Weather": "RAINY", "TimeOfDay": "DAY", "RoadType": "SERVICE",
                                          "Intersection": "YES"}),
    ("scene_dark_night.txt", "SCENE", {"Weather": "DARK", "TimeOfDay": "NIGHT", "RoadType": "RESIDENTIAL",
                                       "Intersection": "YES"}),
]

# answer tables embedded in the prompt templates' output examples
TEMPLATE_CASES = [
    ("VSA_VEHICLE", "VEHICLE", _rows(
        V_COLS,
        "NO|SUV|BRAKE LIGHTS|NO|YES|UNSURE|NO|NO|UNSURE|NO",
        "NO|SEDAN|NONE|YES|UNSURE|UNSURE|NO|NO|NO|NO",
    )),
    ("VSA_PEDESTRIAN", "PEDESTRIAN", _rows(
        P_COLS,
        "NO|YES|NO|YES|NO|NO|NO|NO",
        "NO|NO|YES|NO|YES|NO|NO|NO",
    )),
]


def corpus_text(name: str) -> str:
    return (CORPUS / name).read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def small_scenarios():
    return generate_synthetic(GeneratorConfig(n_scenarios=12), seed=5)


@pytest.fixture(scope="session")
def nusc_scenarios():
    return generate_synthetic(GeneratorConfig(n_scenarios=6, profile="nusc"), seed=9)


_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    print(line)
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:])):
            terminalreporter.write_line(line)
