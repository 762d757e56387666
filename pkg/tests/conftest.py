import numpy as np
import pytest

from downscaling.network import NetSpec
from downscaling.synth import ScenarioParams

DESK_PARAMS = dict(size=32, factor=4, vortex_rmax=4.0, vortex_vmax=3.0, front_width=1.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_params():
    return ScenarioParams(scenario="mixed", **DESK_PARAMS)


@pytest.fixture
def tiny_spec():
    return NetSpec(depth=2, base_width=4, channel_mult=(1, 2), noise_width=8)


@pytest.fixture(scope="session")
def tiny_models():
    """Briefly trained stage models on a 16x16 mixed split; enough for API tests."""
    from downscaling.diffusion import ResidualDiffusion
    from downscaling.optim import TrainConfig
    from downscaling.regression import train_regression
    from downscaling.synth import make_dataset

    p = ScenarioParams(scenario="mixed", size=16, factor=4, vortex_rmax=2.0, front_width=1.0)
    train, test = make_dataset(p, 12, 0), make_dataset(p, 3, 1)
    spec = NetSpec(depth=2, base_width=4, channel_mult=(1, 2), noise_width=8)
    cfg = TrainConfig(batch_size=4, n_samples=80, lr=1e-3)
    reg = train_regression(train, cfg, seed=0, spec=spec)
    diff = ResidualDiffusion(reg, spec=spec, config=cfg, seed=1).fit(train.coarse, train.fine, train.seeds)
    return train, test, reg, diff


TINY_CONFIG = """\
[data]
scenario = mixed
size = 16
factor = 4
vortex_rmax = 2.0
front_width = 1.0
n_scenes = 8

[regression]
depth = 2
base_width = 4
channel_mult = 1,2
noise_width = 8
batch_size = 4
n_samples = 16

[diffusion]
depth = 2
base_width = 4
channel_mult = 1,2
noise_width = 8
batch_size = 4
n_samples = 16
seed = 1

[sampling]
n_steps = 3
sigma_max = 10.0
members = 3

[eval]
n_boot = 50
pdf_bins = 10
"""


def run_pipeline(root, cfg_text=TINY_CONFIG):
    """Run every CLI stage into ``root``; returns the paths by stage name."""
    from downscaling.cli import load_dataset, main

    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.ini"
    cfg.write_text(cfg_text)
    p = {k: root / k for k in ("train", "test", "samples", "report")}
    p.update(reg=root / "reg.rsdf", diff=root / "diff.rsdf", config=cfg)
    c = ["--config", str(cfg)]
    steps = [
        ["gen", *c, "--seed", "0", "--out", str(p["train"])],
        ["gen", *c, "--seed", "1", "--n", "4", "--out", str(p["test"])],
        ["train-reg", *c, "--data", str(p["train"]), "--out", str(p["reg"])],
        ["train-diff", *c, "--data", str(p["train"]), "--reg", str(p["reg"]), "--out", str(p["diff"])],
        ["sample", *c, "--data", str(p["test"]), "--reg", str(p["reg"]), "--diff", str(p["diff"]),
         "--out", str(p["samples"])],
        ["eval", *c, "--data", str(p["test"]), "--samples", str(p["samples"]), "--reg", str(p["reg"]),
         "--out", str(p["report"])],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    kinds = load_dataset(p["test"]).kinds
    p["case"] = root / "case"
    assert main(["case", "--kind", "front" if "front" in kinds else "vortex", "--data", str(p["test"]),
                 "--samples", str(p["samples"]), "--reg", str(p["reg"]), "--out", str(p["case"])]) == 0
    return p


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("cli") / "a")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
