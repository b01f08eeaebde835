# SPDX-FileCopyrightText: © 2021 Open Networking Foundation <support@opennetworking.org>
# SPDX-License-Identifier: Apache-2.0

"""Optional HTTP monitor for a running experiment.

The experiment runs in a worker thread while the server answers health, configuration,
progress, log-level and Prometheus requests. The process stops once the run is over.
"""

from __future__ import absolute_import

import asyncio
import logging
import os
import signal
import traceback
from typing import Any, Callable, Optional, cast

from aiohttp import web
from aiohttp_swagger import setup_swagger  # type: ignore
from prometheus_async import aio  # type: ignore

from .config import RunConfig
from .exceptions import DuplicateRouteError
from .harness import Progress

routes = web.RouteTableDef()


@web.middleware
async def error_middleware(request: web.Request, handler: Callable) -> web.Response:
    """Middleware for returning non-200 responses as JSON."""
    try:
        return cast(web.Response, await handler(request))
    except web.HTTPError as e:
        return web.json_response({"status": "error", "message": e.text}, status=e.status)
    except Exception:
        logging.exception("Error handling request")
        return web.json_response(
            {"status": "error", "message": "Server got itself in trouble"}, status=500
        )


@routes.get("/status")
async def handle_get_status(request: web.Request) -> web.Response:
    """
    ---
    description: Check if the monitor is responsive.
    tags:
    - Health
    responses:
      "200":
        description: Successful operation.
        content:
          text/plain:
            example: "Alive"
    """
    return web.Response(text="Alive")


@routes.get("/config")
async def handle_get_config(request: web.Request) -> web.Response:
    """
    ---
    description: Return the configuration of the running experiment.
    tags:
    - Configuration
    responses:
      "200":
        description: Successful operation.
        content:
          application/json:
            example:
              dataset: sml2010
              window: 24
              hidden: 128
              population: 36
              seed: 0
      "500":
        description: No run configuration is attached to the monitor.
    """
    config = request.app.get("config")
    if not isinstance(config, RunConfig):
        raise web.HTTPInternalServerError(text="No run configuration available")
    return web.json_response(config.to_dict())


@routes.get("/progress")
async def handle_get_progress(request: web.Request) -> web.Response:
    """
    ---
    description: Report the current run stage and the generations completed so far.
    tags:
    - Progress
    responses:
      "200":
        description: Successful operation.
        content:
          application/json:
            example:
              stage: evolve
              repeat: 0
              done: false
              error: null
              generations:
              - generation: 0
                best_loss: 0.0123
                best_ever_loss: 0.0123
                cache_hits: 0
      "500":
        description: No progress tracker is attached to the monitor.
    """
    progress = request.app.get("progress")
    if not isinstance(progress, Progress):
        raise web.HTTPInternalServerError(text="No progress available")
    return web.json_response(progress.snapshot())


@routes.put("/log/{level:[A-Z]+}")
async def handle_set_log_level(request: web.Request) -> web.Response:
    """
    ---
    description: Dynamically set the log level.
    tags:
    - Configuration
    parameters:
    - in: path
      name: level
      description: The new log level.
      required: true
      schema:
        enum: [DEBUG, INFO, WARNING, ERROR, FATAL]
        type: string
    responses:
      "200":
        description: Successful operation.
        content:
          text/plain:
            example: "Log level set to DEBUG from INFO"
      "400":
        description: Invalid log level.
    """
    level = request.match_info["level"]
    prev_level = logging.getLevelName(logging.root.level)

    if level == prev_level:
        return web.Response(text=f"Log level is already {prev_level}")

    try:
        logging.root.setLevel(level)
    except ValueError as e:
        raise web.HTTPBadRequest(text=str(e))

    return web.Response(text=f"Log level set to {level} from {prev_level}")


@routes.get("/metrics")
async def handle_get_metrics(request: web.Request) -> web.Response:
    """
    ---
    description: Scrape the run's Prometheus metrics.
    tags:
    - Prometheus
    responses:
      "200":
        description: Successful operation.
        content:
          text/plain:
            example:
              ealstm_fitness_evaluations_total 216.0\n
              ealstm_fitness_cache_hits_total 14.0\n
              ealstm_best_fitness 0.00871
    """
    return await aio.web.server_stats(request)


def serve(
    job: Callable[[], Any],
    config: RunConfig,
    progress: Progress,
    app: Optional[web.Application] = None,
    **server_kwargs: Any,
) -> web.Application:
    """Run ``job`` in a worker thread behind the monitor server.

    Args:
        job: The experiment, a blocking callable.
        config: The run configuration served at ``/config``.
        progress: The tracker served at ``/progress``; finished when ``job`` returns.
        app: An existing web application object, if available.
        server_kwargs: Variable number of ``kwargs`` to pass to
                       :func:`aiohttp.web.run_app`.
    Raises:
        DuplicateRouteError: A user-supplied route conflicts with one of the monitor
                             routes.
        ValueError: ``job`` is not callable.
    """
    if not callable(job):
        raise ValueError(f"A callable was expected, got {job}")

    if app is None:
        app = web.Application(middlewares=[error_middleware])
    app["job"] = job
    app["config"] = config
    app["progress"] = progress
    app["outcome"] = {}
    app["shutdown_event"] = asyncio.Event()

    try:
        app.add_routes(routes)
    except RuntimeError:
        resources = [(r.method, r.path) for r in routes if isinstance(r, web.RouteDef)]
        raise DuplicateRouteError(
            f"A user-supplied route conflicts with a monitor route: {resources}"
        )

    setup_swagger(app, ui_version=3)

    app.on_startup.append(on_startup)
    app.on_cleanup.append(on_cleanup)
    web.run_app(app, **server_kwargs)
    return app


async def on_startup(app: web.Application) -> None:
    """Create the 'job_task' and 'shutdown_listener'."""
    app["shutdown_listener"] = asyncio.create_task(shutdown_listener(app))
    app["job_task"] = asyncio.create_task(job_wrapper(app))


async def on_cleanup(app: web.Application) -> None:
    """Cancel the 'shutdown_listener' and 'job_task'."""
    app["shutdown_listener"].cancel()
    app["job_task"].cancel()
    await app["shutdown_listener"]

    try:
        await app["job_task"]
    except:  # noqa: E722
        traceback.print_exc(chain=False)


async def job_wrapper(app: web.Application) -> None:
    """Run the job in the default executor and set the 'shutdown_event' when it ends."""
    loop = asyncio.get_running_loop()
    try:
        app["outcome"]["result"] = await loop.run_in_executor(None, app["job"])
        app["progress"].finish()
    except asyncio.CancelledError:
        pass
    except Exception as e:
        app["progress"].finish(e)
        raise
    finally:
        app["shutdown_event"].set()


async def shutdown_listener(app: web.Application) -> None:
    """Wait for the 'shutdown_event' notification to stop the process."""
    try:
        await app["shutdown_event"].wait()
        logging.warning("Run finished, shutting down the monitor")

        # Wait before shutting down
        await asyncio.sleep(1)
        os.kill(os.getpid(), signal.SIGTERM)
    except asyncio.CancelledError:
        pass
