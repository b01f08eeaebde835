# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

from __future__ import absolute_import

from typing import Any

import pytest

import ealstm
from ealstm import config, data
from ealstm.ndcore import Rng

PM25_HEADER = "No,year,month,day,hour,pm2.5,DEWP,TEMP,PRES,cbwd,Iws,Is,Ir"
PM25_ROWS = [
    "1,2010,1,1,0,NA,-21,-11,1021,NW,1.79,0,0",
    "2,2010,1,1,1,NA,-21,-12,1020,NW,4.92,0,0",
    "3,2010,1,1,2,129,-16,-4,1020,SE,1.79,0,0",
    "4,2010,1,1,3,148,-15,-4,1020,SE,2.68,0,0",
    "5,2010,1,1,4,NA,-11,-5,1021,cv,0.89,0,0",
    "6,2010,1,1,5,138,-7,-5,1022,NE,1.79,0,0",
    "7,2010,1,1,6,109,-7,-6,1022,NE,2.68,0,1",
    "8,2010,1,1,7,105,-7,-6,1023,NW,3.57,0,0",
]


@pytest.fixture
def tmp_config_file(tmp_path: Any) -> Any:
    conf = tmp_path / "run.conf"
    conf.write_text("# tiny synthetic run\ndataset = synthetic\nwindow = 4\n")
    yield conf
    conf.unlink()


@pytest.fixture
def pm25_csv(tmp_path: Any) -> Any:
    path = tmp_path / "pm25.csv"
    path.write_text("\n".join([PM25_HEADER] + PM25_ROWS) + "\n")
    yield path


def sml_text(rows: int, rng: Rng) -> str:
    names = ["Date", "Time"] + list(data.SCHEMAS["sml2010"].features)
    header = "# " + " ".join(f"{k + 1}:{name}" for k, name in enumerate(names))
    lines = [header]
    values = rng.uniform((rows, len(names) - 2)) * 20.0
    for r in range(rows):
        fields = ["13/03/2012", f"{r // 4:02d}:{15 * (r % 4):02d}"]
        fields += [f"{v:.4f}" for v in values[r]]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


@pytest.fixture
def sml_file(tmp_path: Any) -> Any:
    path = tmp_path / "NEW-DATA-1.T15.txt"
    path.write_text(sml_text(40, Rng(5)))
    yield path


@pytest.fixture
def small_params() -> ealstm.LstmParams:
    return ealstm.init_params(Rng(7), input_size=3, hidden_size=4, scale=0.5)


@pytest.fixture
def tiny_dataset() -> ealstm.WindowDataset:
    series = data.informative_lag_series(Rng(3), rows=124)
    return data.build_windows(series, length=4, splits=data.Split(train=80, valid=20, test=20))


@pytest.fixture
def tiny_run_config(tmp_path: Any) -> config.RunConfig:
    return config.build(
        overrides={
            "dataset": "synthetic",
            "synthetic_rows": 160,
            "window": 4,
            "hidden": 4,
            "batch_size": 16,
            "population": 4,
            "champions": 2,
            "generations": 2,
            "epochs": 1,
            "final_epochs": 2,
            "test": 20,
            "out": str(tmp_path / "run"),
        }
    )
