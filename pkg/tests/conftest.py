import pytest

TINY_INI = """\
[pipeline]
n_train = 2
n_test = 1
train_seeds = 0
variants = Proposed, NoAtten, EndToEnd
[scenario]
duration_s = 12.0
speed = 0.5, 0.7
[training]
epochs_stage1 = 1
epochs_stage2 = 1
stride = 50
"""


@pytest.fixture(scope="session")
def tiny_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY_INI)
    return path


_CRITERIA = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n = marker.args[0]
    ok = call.excinfo is None
    detail = dict(item.user_properties).get("detail", "")
    prev = _CRITERIA.get(n)
    if prev is not None:
        ok = ok and prev[0]
        detail = "; ".join(s for s in (prev[1], detail) if s)
    _CRITERIA[n] = (ok, detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
