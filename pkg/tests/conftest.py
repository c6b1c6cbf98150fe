import pytest

from msscanet.data import SynthSpec, generate_synthetic
from msscanet.model import ModelConfig


def tiny_config(**overrides):
    """Smallest useful network: 32 px images, 2x2 and 4x4 token grids."""
    base = dict(image_size=32, patch_short=16, patch_long=8, embed_dim=16, window_size=2,
                depth=1, heads=2, reduction=4, head_hidden=8)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    return generate_synthetic(SynthSpec(count=15, image_size=32, seed=1), out)


# ---------------------------------------------------------------------------
# acceptance-criterion reporting: one PASS/FAIL line per criterion at the end

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and rep.passed
    if rep.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] else "FAIL"
        line = f"criterion {number:>2} {status}  {entry['title']}"
        if entry["details"]:
            line += "  [" + "; ".join(entry["details"]) + "]"
        terminalreporter.write_line(line)


@pytest.fixture
def detail(request):
    """Attach a measured value to the criterion summary line."""

    def add(text):
        request.node.user_properties.append(("detail", text))
        print(text)

    return add
