"""Build the three desk datasets (CSV + domain JSON) from their public raw files.

Raw sources, all redistributed on PyPI:
  breast-cancer.tab         Orange3 3.10.0 sdist, Orange/datasets/
  pima.dat                  imbalanced_databases 0.1.1 wheel (KEEL format)
  compas.csv                responsibly 0.1.2 wheel, compas-scores-two-years.csv

Usage: python scripts/prepare_datasets.py RAW_DIR OUT_DIR
"""

import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd


def _write(df: pd.DataFrame, domain: dict, out: Path, name: str) -> None:
    df.to_csv(out / f"{name}.csv", index=False)
    (out / f"{name}.domain.json").write_text(json.dumps(domain, indent=1) + "\n")
    sizes = [len(v) if isinstance(v, list) else len(v["edges"]) - 1 for v in domain.values()]
    print(f"{name}: N={len(df)} d={len(sizes)} |Omega|={int(np.prod(sizes))} sizes={sizes}")


def cancer(raw: Path, out: Path) -> None:
    df = pd.read_csv(raw / "breast-cancer.tab", sep="\t", skiprows=[1, 2], dtype=str, keep_default_na=False)
    # class column last; "?" stays its own category
    df = df[[c for c in df.columns if c != "recurrence"] + ["recurrence"]]
    domain = {c: sorted(df[c].unique()) for c in df.columns}
    _write(df, domain, out, "cancer")


def diabetes(raw: Path, out: Path) -> None:
    lines = [l for l in (raw / "pima.dat").read_text().splitlines() if l and not l.startswith("@")]
    cols = ["Preg", "Plas", "Pres", "Skin", "Insu", "Mass", "Pedi", "Age", "Class"]
    df = pd.DataFrame([l.split(",") for l in lines], columns=cols)
    bins = {"Preg": 5, "Plas": 5, "Pres": 5, "Skin": 5, "Insu": 5, "Mass": 5, "Pedi": 4, "Age": 3}
    domain = {}
    for c, k in bins.items():
        x = df[c].astype(float)
        # equal-width over the observed range
        domain[c] = {"edges": [round(float(e), 6) for e in np.linspace(x.min(), x.max(), k + 1)]}
    domain["Class"] = ["negative", "positive"]
    _write(df, domain, out, "diabetes")


def compas(raw: Path, out: Path, n_rows: int = 5150, seed: int = 42) -> None:
    df = pd.read_csv(raw / "compas.csv")
    df = df[
        (df.days_b_screening_arrest.abs() <= 30)
        & (df.is_recid != -1)
        & (df.c_charge_degree != "O")
        & (df.score_text != "N/A")
    ].copy()
    stay = (pd.to_datetime(df.c_jail_out) - pd.to_datetime(df.c_jail_in)).dt.days
    race = df.race.where(df.race.isin(["African-American", "Caucasian"]), "Other")
    table = pd.DataFrame({
        "sex": df.sex,
        "age_cat": df.age_cat,
        "race": race,
        "c_charge_degree": df.c_charge_degree,
        "priors_count": df.priors_count,
        "length_of_stay": stay,
        "two_year_recid": df.two_year_recid.astype(str),
    })
    # subsample so the 80% train split has 4120 records
    table = table.sample(n=n_rows, random_state=seed).sort_index().reset_index(drop=True)
    domain = {
        "sex": ["Female", "Male"],
        "age_cat": ["25 - 45", "Greater than 45", "Less than 25"],
        "race": ["African-American", "Caucasian", "Other"],
        "c_charge_degree": ["F", "M"],
        "priors_count": {"edges": [0, 1, 2, 3, 4, 6, 9, 13, 20, 39]},
        "length_of_stay": {"edges": [-1, 0, 1, 2, 4, 7, 14, 30, 90, 800]},
        "two_year_recid": ["0", "1"],
    }
    _write(table, domain, out, "compas")


def main(argv):
    if len(argv) != 3:
        print(__doc__)
        return 2
    raw, out = Path(argv[1]), Path(argv[2])
    out.mkdir(parents=True, exist_ok=True)
    cancer(raw, out)
    diabetes(raw, out)
    compas(raw, out)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
