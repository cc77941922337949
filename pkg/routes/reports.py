# ---------------------------
# Run report browsing (read-only)
# ---------------------------

import json
import logging
import os

from fastapi import APIRouter, FastAPI, HTTPException, Request

from config import LAB_VERSION
from experiments import index_runs

logger = logging.getLogger(__name__)

router = APIRouter()


def _root(request: Request) -> str:
    return request.app.state.runs_root


def _run_file(root: str, name: str, filename: str) -> dict:
    # run names are plain directory names directly under the root
    if not name or name != os.path.basename(name) or name in (".", ".."):
        raise HTTPException(status_code=404, detail="run not found")
    path = os.path.join(root, name, filename)
    if not os.path.isfile(path):
        raise HTTPException(status_code=404, detail=f"{filename} not found for run '{name}'")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


@router.get("/health")
def health(request: Request):
    return {"status": "ok", "lab_version": LAB_VERSION, "runs_root": _root(request)}


@router.get("/runs")
def list_runs(request: Request):
    return {"runs": index_runs(_root(request))}


@router.get("/runs/{name}/manifest")
def run_manifest(name: str, request: Request):
    return _run_file(_root(request), name, "manifest.json")


@router.get("/runs/{name}/report")
def run_report(name: str, request: Request):
    return _run_file(_root(request), name, "report.json")


def create_app(root: str) -> FastAPI:
    app = FastAPI(
        title="ssm-dynlab reports",
        description="Read-only browser for experiment runs.",
        version=LAB_VERSION,
    )
    app.state.runs_root = root
    app.include_router(router)
    logger.info("[ROUTER] serving runs under %s", root)
    return app
