"""Command-line client. Talks to the HTTP service, in-process unless --server is given."""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

from . import config as C
from .analysis import dumps

SUBCOMMANDS = {
    "train": ("/train", ("model", "data", "train", "adapt", "checkpoint")),
    "bench": ("/bench", ("model", "data", "train", "adapt")),
    "measure-id": ("/measure-id", ("model", "data", "train", "id")),
    "count": ("/count", ("model", "adapt", "count")),
    "merge": ("/merge", ("checkpoint",)),
}
HELP = {
    "train": "train one strategy over the seeds and grid",
    "bench": "run the benchmark suite and write results/timing tables",
    "measure-id": "measure the local intrinsic dimension of a submodule",
    "count": "enumerate trainable parameters and reconcile with the closed forms",
    "merge": "fold a LoRA/KAdaptation checkpoint into plain base weights",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        C.add_flags(sub.add_parser(name, help=HELP[name]))
    return parser


def build_request(command: str, merged: dict) -> dict:
    _, sections = SUBCOMMANDS[command]
    body = {s: merged.get(s, {}) for s in sections}
    if command != "merge":
        body["seed"] = merged["common"]["seed"]
    out_dir = merged["common"]["out_dir"]
    ck = body.get("checkpoint")
    if ck:
        # Outputs land in out_dir unless given as absolute paths.
        for key in ("checkpoint_out", "merged_out"):
            if ck.get(key) and not os.path.isabs(ck[key]):
                ck[key] = os.path.abspath(os.path.join(out_dir, ck[key]))
        if ck.get("checkpoint"):
            ck["checkpoint"] = os.path.abspath(ck["checkpoint"])
    return body


def post(server: Optional[str], route: str, body: dict) -> tuple[int, dict]:
    if server:
        import httpx

        resp = httpx.post(server.rstrip("/") + route, json=body, timeout=None)
    else:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            from fastapi.testclient import TestClient
        from .service.app import app

        resp = TestClient(app).post(route, json=body)
    return resp.status_code, resp.json()


def _write(out_dir: str, name: str, text: str) -> str:
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def write_outputs(command: str, data: dict, out_dir: str, fmt: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    stem = command.replace("-", "_")
    if fmt == "json" or command in ("measure-id", "merge"):
        written.append(_write(out_dir, f"{stem}.json", dumps(data) + "\n"))
    if fmt == "csv":
        if command in ("train", "bench"):
            written.append(_write(out_dir, "results.csv", data["results_csv"]))
        if command == "bench":
            written.append(_write(out_dir, "timing.csv", data["timing_csv"]))
        if command == "count":
            written.append(_write(out_dir, "counts.csv", data["csv"]))
    return written


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        merged = C.resolve(args)
    except C.ConfigError as exc:
        print(f"kadapt: {exc}", file=sys.stderr)
        return 2
    route, _ = SUBCOMMANDS[args.command]
    common = merged["common"]
    status, data = post(common["server"], route, build_request(args.command, merged))
    if status != 200:
        detail = data.get("detail", data) if isinstance(data, dict) else data
        print(f"kadapt {args.command}: error {status}: {json.dumps(detail)}", file=sys.stderr)
        return 1
    for path in write_outputs(args.command, data, common["out_dir"], common["format"]):
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
