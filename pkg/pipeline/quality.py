"""Data quality schemas and validation gate.

Uses Pandera to define what valid datasets, eval reports and training metrics
look like. A frame that fails validation stops the command; bad records never
reach a run directory.

CRITICAL: Must use `import pandera.pandas` on Python 3.14.
The standard `import pandera` crashes with:
    KeyError: <class 'pandas.core.series.Series'>
"""

import numpy as np
import pandas as pd
import pandera.pandas as pa


def _finite():
    return pa.Check(lambda s: np.isfinite(s), element_wise=False, error="must be finite")


def dataset_schema(spec) -> pa.DataFrameSchema:
    """Dataset records: a condition label in [0, C) and d finite coordinates."""
    columns = {"condition": pa.Column(int, pa.Check.in_range(0, spec.num_conditions - 1), nullable=False)}
    for i in range(spec.data_dim):
        columns[f"x_{i}"] = pa.Column(float, _finite(), nullable=False)
    return pa.DataFrameSchema(columns, strict=True, coerce=True)


EvalReportSchema = pa.DataFrameSchema(
    {
        "condition": pa.Column(str, nullable=False),
        "n_samples": pa.Column(int, pa.Check.gt(0)),
        "energy_distance": pa.Column(float, _finite()),
        "energy_distance_se": pa.Column(float, [_finite(), pa.Check.ge(0)]),
        "loglik_mean": pa.Column(float, _finite()),
        "loglik_median": pa.Column(float, _finite()),
        "loglik_se": pa.Column(float, [_finite(), pa.Check.ge(0)]),
        "target_loglik_mean": pa.Column(float, _finite()),
        "dsm_excess": pa.Column(float, [_finite(), pa.Check.ge(0)]),
    },
    coerce=True,
)


MetricsSchema = pa.DataFrameSchema(
    {
        "kind": pa.Column(str, pa.Check.isin(["sft_step", "spin_step"])),
        "step": pa.Column(int, pa.Check.ge(0)),
        "loss": pa.Column(float, _finite()),
        "lr": pa.Column(float, pa.Check.ge(0)),
    },
    coerce=True,
)


def validate(df: pd.DataFrame, schema: pa.DataFrameSchema) -> pd.DataFrame:
    """Gate a dataset, eval-report or step-log frame; returns the coerced frame.

    Checks run lazily: one SchemaErrors lists every failing record and column
    of the frame rather than the first one found.
    """
    return schema.validate(df, lazy=True)
