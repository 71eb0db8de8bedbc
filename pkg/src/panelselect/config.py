"""Run configuration read from a YAML file.

Schema (version 1)::

    schema_version: 1
    paths:
      data: panel.csv        # input for estimate/describe, output name for simulate
      truth: truth.json      # optional; defaults to truth.json next to the data
      out: out               # output directory
    dgp:                     # simulate only; omitted fields take the values below
      n: 2000
      seed: 7
      T: 6
      theta: [1.5, 0.3, -0.5]
      alpha: [0.4, 0.5, -0.4, -0.5]
      beta: [2.0, 0.1, -0.2, 0.05]
      s1: 0.3
      s2: 0.4
      s3: 1.0
      sigma13: 0.1
      sigma23: 0.2
      sd_u3: 0.4
      sd_v3: 0.3
      replicate_weights: 0
      covariates:            # optional, defaults to the built-in generator
        covariates: [{name: x1, kind: normal, mean: 0, sd: 1}, ...]
        z_vars: [x1, moved]
        x_vars: [...]
        w_vars: [...]
    model:                   # defaults to the dgp block's equations
      z_vars: [x1, moved]
      x_vars: [x1, female, nonlabor]
      w_vars: [x1, female, exper]
      wave_dummies: {attrition: true, employment: true, wage: true}
      weight_mode: unweighted
      allow_nonlinear_identification: false
    estimation:
      seed: 1
      R: 50
      max_iter: 500
      gtol: 1.0e-6
      bootstrap: 0
      bootstrap_seed: 1      # defaults to seed
      freeze_loadings: false
      antithetic: false
    describe:
      variables: [employed, log_wage, x1]
      replicate_prefix: null # e.g. bsw
      brr_scale: 1.0
      bootstrap: 200
      seed: 3
    output:
      format: pretty         # pretty | csv | tsv

Relative paths are resolved against the directory holding the config file.
Seeds are never defaulted from the clock.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import ModelSpec
from .dgp import DEFAULT_COVARIATES, DEFAULT_PARAMS, CovariateGen, CovariateSpec, TrueParams
from .errors import ConfigError, PanelSelectError

SCHEMA_VERSION = 1
FORMATS = ("pretty", "csv", "tsv")


@dataclass(frozen=True)
class EstimationConfig:
    seed: int | None = None
    R: int = 50
    max_iter: int = 500
    gtol: float = 1e-6
    bootstrap: int = 0
    bootstrap_seed: int | None = None
    freeze_loadings: bool = False
    antithetic: bool = False


@dataclass(frozen=True)
class DescribeConfig:
    variables: tuple[str, ...] = ("employed", "log_wage")
    replicate_prefix: str | None = None
    brr_scale: float = 1.0
    bootstrap: int = 200
    seed: int | None = None


@dataclass(frozen=True)
class RunConfig:
    base_dir: Path
    data_path: Path | None  # None: panel.csv inside the output directory
    truth: Path | None
    out: Path
    dgp: TrueParams | None = None
    n: int | None = None
    dgp_seed: int | None = None
    replicate_weights: int = 0
    model: ModelSpec | None = None
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    describe: DescribeConfig = field(default_factory=DescribeConfig)
    format: str = "pretty"

    @property
    def data(self) -> Path:
        return self.data_path if self.data_path is not None else self.out / "panel.csv"

    def with_out(self, out) -> "RunConfig":
        return dataclasses.replace(self, out=Path(out))

    def truth_path(self) -> Path | None:
        if self.truth is not None:
            return self.truth
        guess = self.data.parent / "truth.json"
        return guess if guess.exists() else None


def _check_keys(block: dict, allowed, where: str):
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _block(raw: dict, name: str) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    return value


def _seed(value, where: str) -> int | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2**64:
        raise ConfigError(f"{where} must be an unsigned 64-bit integer, got {value!r}")
    return value


def _dataclass_from(cls, block: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(block, names, where)
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _covariates(block: dict) -> CovariateGen:
    _check_keys(block, ("covariates", "z_vars", "x_vars", "w_vars"), "dgp.covariates")
    try:
        specs = tuple(CovariateSpec(**c) for c in block["covariates"])
        return CovariateGen(specs, block["z_vars"], block["x_vars"], block["w_vars"])
    except KeyError as exc:
        raise ConfigError(f"dgp.covariates: missing key {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"dgp.covariates: {exc}") from exc


def parse_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _check_keys(raw, ("schema_version", "paths", "dgp", "model", "estimation", "describe", "output"), "config")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")

    base_dir = Path(base_dir)
    paths = _block(raw, "paths")
    _check_keys(paths, ("data", "truth", "out"), "paths")
    out = base_dir / paths.get("out", "out")
    data = base_dir / paths["data"] if paths.get("data") else None
    truth = base_dir / paths["truth"] if paths.get("truth") else None

    dgp_raw = dict(_block(raw, "dgp"))
    dgp = n = dgp_seed = None
    reps = 0
    if dgp_raw:
        n = dgp_raw.pop("n", None)
        dgp_seed = _seed(dgp_raw.pop("seed", None), "dgp.seed")
        reps = dgp_raw.pop("replicate_weights", 0)
        if n is None or isinstance(n, bool) or not isinstance(n, int) or n < 1:
            raise ConfigError(f"dgp.n must be a positive integer, got {n!r}")
        if not isinstance(reps, int) or reps < 0:
            raise ConfigError("dgp.replicate_weights must be a non-negative integer")
        cov = dgp_raw.pop("covariates", None)
        allowed = {f.name for f in dataclasses.fields(TrueParams)} - {"covariates"}
        _check_keys(dgp_raw, allowed, "dgp")
        try:
            dgp = dataclasses.replace(DEFAULT_PARAMS, **dgp_raw,
                                      covariates=_covariates(cov) if cov else DEFAULT_COVARIATES)
        except TypeError as exc:
            raise ConfigError(f"dgp: {exc}") from exc
        except PanelSelectError as exc:
            raise ConfigError(f"dgp: {exc}") from exc

    model_raw = _block(raw, "model")
    model = None
    if model_raw or dgp is not None:
        m = dict(model_raw)
        if dgp is not None:
            cg = dgp.covariates
            m.setdefault("z_vars", cg.z_vars)
            m.setdefault("x_vars", cg.x_vars)
            m.setdefault("w_vars", cg.w_vars)
        model = _dataclass_from(ModelSpec, m, "model")

    est = _dataclass_from(EstimationConfig, _block(raw, "estimation"), "estimation")
    _seed(est.seed, "estimation.seed")
    _seed(est.bootstrap_seed, "estimation.bootstrap_seed")
    if est.R < 1:
        raise ConfigError("estimation.R must be >= 1")
    if est.bootstrap and est.bootstrap < 50:
        raise ConfigError("estimation.bootstrap must be 0 or >= 50")

    desc_raw = dict(_block(raw, "describe"))
    if "variables" in desc_raw:
        desc_raw["variables"] = tuple(desc_raw["variables"])
    desc = _dataclass_from(DescribeConfig, desc_raw, "describe")
    _seed(desc.seed, "describe.seed")

    output = _block(raw, "output")
    _check_keys(output, ("format",), "output")
    fmt = output.get("format", "pretty")
    if fmt not in FORMATS:
        raise ConfigError(f"output.format must be one of {FORMATS}, got {fmt!r}")

    return RunConfig(base_dir=base_dir, data_path=data, truth=truth, out=out, dgp=dgp, n=n, dgp_seed=dgp_seed,
                     replicate_weights=reps, model=model, estimation=est, describe=desc, format=fmt)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return parse_config(raw, path.parent)
