"""Command-line client for the pipeline service.

Every subcommand builds a typed request and sends it through the service
app — in-process by default, or to a running server with --server — so the
CLI and HTTP paths validate and execute identically.  Exit codes: 0 success,
1 validation failure (bad flags, paths, or configs), 2 numerical failure
(training divergence, failed gradient check).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    if path.endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise click.UsageError(f"{path}: config file must hold an object")
    return data


def _set_path(cfg: dict, dotted: str, raw: str) -> None:
    """Apply one --set key=value override; values parse as JSON when they can."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    keys = dotted.split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise click.UsageError(f"--set {dotted}: {k} is not an object")
    node[keys[-1]] = value


def _merge_config(config_file: str | None, sets: tuple[str, ...],
                  **flags) -> dict:
    cfg = _load_config_file(config_file)
    for s in sets:
        if "=" not in s:
            raise click.UsageError(f"--set needs key=value, got {s!r}")
        _set_path(cfg, *s.split("=", 1))
    for key, value in flags.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _csv(value: str | None) -> list[str] | None:
    return None if value is None else [v for v in value.split(",") if v]


def _floats(value: str | None, n: int, flag: str) -> tuple[float, ...] | None:
    if value is None:
        return None
    parts = value.split(",")
    if len(parts) != n:
        raise click.UsageError(f"{flag} needs {n} comma-separated numbers")
    return tuple(float(p) for p in parts)


class _Client:
    """POSTs to a live server or straight into the in-process app."""

    def __init__(self, server: str | None):
        self._server = server
        self._client = None

    def _connect(self):
        if self._client is not None:
            return self._client
        if self._server is None:
            import warnings

            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app())
        else:
            import httpx

            self._client = httpx.Client(base_url=self._server, timeout=None)
        return self._client

    def post(self, path: str, payload: dict) -> dict:
        resp = self._connect().post(path, json=payload)
        try:
            body = resp.json()
        except ValueError:
            click.echo(f"error: bad response ({resp.status_code})", err=True)
            sys.exit(1)
        if resp.status_code == 200:
            return body
        message = body.get("error") or json.dumps(body.get("detail", body))
        kind = body.get("kind", "validation")
        click.echo(f"error ({kind}): {message}", err=True)
        sys.exit(2 if kind == "numerical" else 1)


def _emit(body: dict) -> dict:
    click.echo(json.dumps(body["result"], indent=2, sort_keys=True))
    return body["result"]


_CONFIG_OPTS = [
    click.option("--config", "config_file", type=click.Path(exists=True),
                 default=None, help="JSON or YAML config file."),
    click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                 help="Override any config key (dotted paths allowed)."),
    click.option("--seed", type=int, default=None),
]


def _with_config_opts(fn):
    for opt in reversed(_CONFIG_OPTS):
        fn = opt(fn)
    return fn


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Send commands to a running service instead of in-process.")
@click.pass_context
def cli(ctx, server):
    """Two-stage inverse rendering: surfel geometry, sun/sky lighting,
    relighting."""
    ctx.obj = _Client(server)


@cli.command()
@click.argument("out_dir", type=click.Path())
@click.option("--views", type=int, default=None, help="Training views.")
@click.option("--lightings", type=int, default=None,
              help="Distinct lighting conditions.")
@click.option("--size", type=int, default=None, help="Square image size.")
@_with_config_opts
@click.pass_obj
def synth(client, out_dir, views, lightings, size, config_file, sets, seed):
    """Generate a synthetic benchmark dataset with ground truth."""
    cfg = _merge_config(config_file, sets, seed=seed)
    scene = cfg.setdefault("scene", {})
    if views is not None:
        scene["n_views"] = views
    if lightings is not None:
        scene["n_lightings"] = lightings
    if size is not None:
        scene["width"] = scene["height"] = size
    _emit(client.post("/v1/synth", {"out_dir": out_dir, "config": cfg}))


def _preset_config(preset: str | None, stage: str, cfg: dict) -> dict:
    if preset is None:
        return cfg
    from .config import PRESETS

    if preset not in PRESETS:
        raise click.UsageError(f"unknown preset {preset!r} "
                               f"(have {sorted(PRESETS)})")
    return {**PRESETS[preset][stage], **cfg}


@cli.command("train-stage1")
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.argument("out_dir", type=click.Path())
@click.option("--preset", default=None, help="Named config preset.")
@click.option("--iterations", type=int, default=None)
@_with_config_opts
@click.pass_obj
def train_stage1(client, dataset_dir, out_dir, preset, iterations,
                 config_file, sets, seed):
    """Optimize surfel geometry and appearance against the dataset."""
    cfg = _merge_config(config_file, sets, seed=seed, iterations=iterations)
    cfg = _preset_config(preset, "stage1", cfg)
    _emit(client.post("/v1/train-stage1",
                      {"dataset_dir": dataset_dir, "out_dir": out_dir,
                       "config": cfg}))


@cli.command("extract-mesh")
@click.argument("checkpoint_dir", type=click.Path(exists=True))
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.argument("out_dir", type=click.Path())
@click.option("--resolution", type=int, default=None, help="TSDF voxels.")
@_with_config_opts
@click.pass_obj
def extract_mesh(client, checkpoint_dir, dataset_dir, out_dir, resolution,
                 config_file, sets, seed):
    """Fuse rendered depth into a watertight occluder mesh."""
    cfg = _merge_config(config_file, sets, seed=seed, resolution=resolution)
    _emit(client.post("/v1/extract-mesh",
                      {"checkpoint_dir": checkpoint_dir,
                       "dataset_dir": dataset_dir, "out_dir": out_dir,
                       "config": cfg}))


@cli.command("train-stage2")
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.argument("stage1_dir", type=click.Path(exists=True))
@click.argument("mesh_path", type=click.Path(exists=True))
@click.argument("out_dir", type=click.Path())
@click.option("--preset", default=None, help="Named config preset.")
@click.option("--phase-iters", default=None, metavar="A,B,C",
              help="Iterations for the three phases.")
@_with_config_opts
@click.pass_obj
def train_stage2(client, dataset_dir, stage1_dir, mesh_path, out_dir, preset,
                 phase_iters, config_file, sets, seed):
    """Decompose per-image lighting and albedo on frozen geometry."""
    pi = _floats(phase_iters, 3, "--phase-iters")
    cfg = _merge_config(config_file, sets, seed=seed,
                        phase_iters=None if pi is None
                        else [int(x) for x in pi])
    cfg = _preset_config(preset, "stage2", cfg)
    _emit(client.post("/v1/train-stage2",
                      {"dataset_dir": dataset_dir, "stage1_dir": stage1_dir,
                       "mesh_path": mesh_path, "out_dir": out_dir,
                       "config": cfg}))


@cli.command()
@click.argument("checkpoint_dir", type=click.Path(exists=True))
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.argument("out_dir", type=click.Path())
@click.option("--mesh", "mesh_path", type=click.Path(exists=True),
              default=None, help="Occluder mesh for cast shadows.")
@click.option("--frames", default=None, metavar="A,B,...",
              help="Subset of frame names (default all).")
@click.option("--no-shading", "shading", flag_value=False, default=None,
              help="Splat raw albedo instead of shaded color.")
@click.option("--png", "float_raster", flag_value=False, default=None,
              help="Write sRGB PNG instead of float TIFF.")
@_with_config_opts
@click.pass_obj
def render(client, checkpoint_dir, dataset_dir, out_dir, mesh_path, frames,
           shading, float_raster, config_file, sets, seed):
    """Re-render dataset frames from a trained checkpoint."""
    cfg = _merge_config(config_file, sets, seed=seed, frames=_csv(frames),
                        shading=shading, float_raster=float_raster)
    _emit(client.post("/v1/render",
                      {"checkpoint_dir": checkpoint_dir,
                       "dataset_dir": dataset_dir, "out_dir": out_dir,
                       "mesh_path": mesh_path, "config": cfg}))


@cli.command()
@click.argument("checkpoint_dir", type=click.Path(exists=True))
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.argument("out_dir", type=click.Path())
@click.option("--mesh", "mesh_path", type=click.Path(exists=True),
              default=None, help="Occluder mesh for cast shadows.")
@click.option("--frames", default=None, metavar="A,B,...")
@click.option("--envmap", type=click.Path(exists=True), default=None,
              help="Lat-long HDR environment map to fit and apply.")
@click.option("--sun-direction", default=None, metavar="X,Y,Z")
@click.option("--sun-amplitude", default=None, metavar="R,G,B")
@click.option("--sun-sharpness", type=float, default=None)
@click.option("--sky-dc", default=None, metavar="R,G,B",
              help="Constant sky (DC spherical-harmonic term).")
@click.option("--lighting-file", type=click.Path(exists=True), default=None)
@click.option("--lighting-name", default=None)
@click.option("--png", "float_raster", flag_value=False, default=None)
@_with_config_opts
@click.pass_obj
def relight(client, checkpoint_dir, dataset_dir, out_dir, mesh_path, frames,
            envmap, sun_direction, sun_amplitude, sun_sharpness, sky_dc,
            lighting_file, lighting_name, float_raster, config_file, sets,
            seed):
    """Render the scene under a new lighting environment."""
    cfg = _merge_config(
        config_file, sets, seed=seed, frames=_csv(frames), envmap=envmap,
        sun_direction=_floats(sun_direction, 3, "--sun-direction"),
        sun_amplitude=_floats(sun_amplitude, 3, "--sun-amplitude"),
        sun_sharpness=sun_sharpness,
        sky_sh_dc=_floats(sky_dc, 3, "--sky-dc"),
        lighting_file=lighting_file, lighting_name=lighting_name,
        float_raster=float_raster)
    _emit(client.post("/v1/relight",
                      {"checkpoint_dir": checkpoint_dir,
                       "dataset_dir": dataset_dir, "out_dir": out_dir,
                       "mesh_path": mesh_path, "config": cfg}))


@cli.command()
@click.argument("pred", type=click.Path(exists=True))
@click.argument("ref", type=click.Path(exists=True))
@click.argument("out_path", type=click.Path())
@click.option("--kind", default="images",
              type=click.Choice(["images", "lighting", "shadows", "normals"]))
@click.option("--mask-root", type=click.Path(exists=True), default=None,
              help="Dataset root supplying per-frame semantic masks.")
@click.option("--mask", default="none",
              type=click.Choice(["none", "static", "nondynamic"]))
@click.pass_obj
def evaluate(client, pred, ref, out_path, kind, mask_root, mask):
    """Score predictions against ground truth; writes a JSON report."""
    _emit(client.post("/v1/evaluate",
                      {"pred": pred, "ref": ref, "out_path": out_path,
                       "kind": kind, "mask_root": mask_root, "mask": mask}))


@cli.command()
@click.argument("out_dir", type=click.Path())
@click.option("--scenes", type=int, default=None, help="Random scenes.")
@_with_config_opts
@click.pass_obj
def gradcheck(client, out_dir, scenes, config_file, sets, seed):
    """Check analytic gradients against central differences."""
    cfg = _merge_config(config_file, sets, seed=seed, n_scenes=scenes)
    result = _emit(client.post("/v1/gradcheck",
                               {"out_dir": out_dir, "config": cfg}))
    if not result.get("passed", False):
        click.echo("gradient check failed", err=True)
        sys.exit(2)


@cli.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host, port):
    """Run the pipeline service over HTTP."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


def main() -> None:
    try:
        cli.main(standalone_mode=False)
    except click.ClickException as e:
        e.show()
        sys.exit(1)
    except click.Abort:
        click.echo("aborted", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
