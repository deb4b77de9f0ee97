import pytest

from depflow import pipeline as P

TINY = """seed = 0
world.n_subjects = 10
world.utterances_per_subject = 6
dae.max_epochs = 1
dae.conv_channels = 16
dae.frame_proj_dim = 32
dae.post_hidden = 32
gen.pretrain_epochs = 1
gen.finetune_epochs = 1
gen.pretrain_subjects = 4
gen.pretrain_utterances = 24
gen.channels = 16
gen.enc_channels = 16
gen.cond_dim = 32
gen.film_hidden = 8
gen.ode_steps = 2
cdoa.base = 1
detector.n_seeds = 2
detector.epochs = 1
report.sweep_base = 3
"""


@pytest.fixture(scope="session")
def tiny_experiment(tmp_path_factory):
    """A fully built miniature experiment, shared read-only across tests."""
    path = tmp_path_factory.mktemp("exp") / "tiny"
    path.mkdir()
    (path / "experiment.cfg").write_text(TINY)
    exp = P.Experiment.create(path)
    P.run_all(exp)
    return exp


# one line per acceptance criterion, printed at the end of the run
CRITERIA: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
