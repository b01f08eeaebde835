# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

from __future__ import absolute_import

from typing import Any
from unittest import mock

import pytest
from aiohttp import web

from ealstm import server, telemetry
from ealstm.crs import GenerationReport
from ealstm.harness import Progress, Stage


@pytest.fixture
def monitor_app(tiny_run_config: Any) -> Any:
    app = web.Application(middlewares=[server.error_middleware])
    app["shutdown_event"] = mock.Mock()
    app["config"] = tiny_run_config
    app["progress"] = Progress()
    app.add_routes(server.routes)
    yield app


def _report(generation: int) -> GenerationReport:
    return GenerationReport(
        generation=generation,
        champion_losses=(0.5, 0.75),
        champions=("000000", "111111"),
        best_genome="000000",
        best_loss=0.5,
        best_ever_loss=0.5,
        mean_loss=0.8,
        evaluations=4,
        cache_hits=0,
        diverged=0,
    )


async def test_json_error_middleware(monitor_app: Any, aiohttp_client: Any) -> None:
    async def raise_exception(request: web.Request) -> web.Response:
        raise Exception

    monitor_app.router.add_get("/", raise_exception)
    client = await aiohttp_client(monitor_app)
    resp = await client.get("/")
    assert resp.status == 500
    assert resp.content_type == "application/json"
    json_response = await resp.json()
    assert json_response["status"] == "error"
    assert json_response["message"] == "Server got itself in trouble"


async def test_get_status(monitor_app: Any, aiohttp_client: Any) -> None:
    client = await aiohttp_client(monitor_app)
    resp = await client.get("/status")
    assert resp.status == 200
    assert resp.content_type == "text/plain"
    text = await resp.text()
    assert text == "Alive"


async def test_get_config(monitor_app: Any, aiohttp_client: Any, tiny_run_config: Any) -> None:
    client = await aiohttp_client(monitor_app)
    resp = await client.get("/config")
    assert resp.status == 200
    assert resp.content_type == "application/json"
    json_response = await resp.json()
    assert json_response == tiny_run_config.to_dict()
    assert json_response["population"] == 4

    # No configuration attached
    monitor_app["config"] = None
    resp = await client.get("/config")
    assert resp.status == 500
    json_response = await resp.json()
    assert json_response["status"] == "error"
    assert json_response["message"] == "No run configuration available"


async def test_get_progress(monitor_app: Any, aiohttp_client: Any) -> None:
    client = await aiohttp_client(monitor_app)
    resp = await client.get("/progress")
    assert resp.status == 200
    json_response = await resp.json()
    assert json_response == {
        "stage": None,
        "repeat": 0,
        "done": False,
        "error": None,
        "generations": [],
    }

    progress = monitor_app["progress"]
    progress.set_stage(Stage.EVOLVE, repeat=1)
    progress.add_generation(_report(0))
    progress.add_generation(_report(1))
    resp = await client.get("/progress")
    json_response = await resp.json()
    assert json_response["stage"] == "evolve"
    assert [g["generation"] for g in json_response["generations"]] == [0, 1]
    assert json_response["generations"][0]["repeat"] == 1
    assert json_response["generations"][0]["champions"] == ["000000", "111111"]

    progress.finish(ValueError("boom"))
    json_response = await (await client.get("/progress")).json()
    assert json_response["done"] is True
    assert json_response["error"] == "boom"

    # No tracker attached
    monitor_app["progress"] = None
    resp = await client.get("/progress")
    assert resp.status == 500
    json_response = await resp.json()
    assert json_response["message"] == "No progress available"


async def test_set_log_level(monitor_app: Any, aiohttp_client: Any) -> None:
    client = await aiohttp_client(monitor_app)
    with mock.patch.object(server.logging, "getLevelName", return_value="WARNING"):
        # Log level already the same
        resp = await client.put("/log/WARNING")
        assert resp.status == 200
        assert resp.content_type == "text/plain"
        text = await resp.text()
        assert text == "Log level is already WARNING"

        # Log level set
        resp = await client.put("/log/INFO")
        assert resp.status == 200
        assert resp.content_type == "text/plain"
        text = await resp.text()
        assert text == "Log level set to INFO from WARNING"

        # Unknown log level
        resp = await client.put("/log/FAKELEVEL")
        assert resp.status == 400
        assert resp.content_type == "application/json"
        json_response = await resp.json()
        assert json_response["status"] == "error"
        assert json_response["message"] == "Unknown level: 'FAKELEVEL'"


async def test_get_metrics(monitor_app: Any, aiohttp_client: Any) -> None:
    telemetry.FITNESS_EVALUATIONS.inc()
    client = await aiohttp_client(monitor_app)
    resp = await client.get("/metrics")
    assert resp.status == 200
    assert resp.content_type == "text/plain"
    text = await resp.text()
    assert "ealstm_fitness_evaluations_total" in text
