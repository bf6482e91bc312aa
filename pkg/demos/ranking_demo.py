"""Compare the three projection frameworks on one synthetic panel.

Generates a 300-bank panel with nonlinear macro responses, trains the
constant balance sheet, the BMA satellites and the Bayesian LWTA network on
2010-2013 data from the training banks, and reports one-year-ahead CAR
errors for as_of quarters in 2014.

    python3 demos/ranking_demo.py [seed]
"""

import sys
import time

import numpy as np

from deepstress import evaluation as E
from deepstress import frameworks as F
from deepstress.bma import BmaOptions
from deepstress.panel import FeatureRecipe, Quarter, build_features, split_panel
from deepstress.synthetic import synthetic_panel

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
recipe = FeatureRecipe(macro_lags=(0,), financial_lags=(0,), macro_anchor="target",
                       included_macro=("gdp", "unr", "yield10y", "stocks"))

records, macro = synthetic_panel(300, 24, seed)
split = split_panel(records, 0.8, seed)
panel = build_features(records, macro, recipe)
window = panel.window_mask((Quarter(2010, 1), Quarter(2013, 4)))
train = panel.subset(window & panel.entity_mask(split.train_ids))
valid = panel.subset(window & panel.entity_mask(split.validation_ids))
print(f"seed {seed}: {len(train)} training rows, {len(valid)} validation rows")

options = F.FrameworkOptions(
    bma=BmaOptions(seed=seed),
    deep=F.DeepOptions(widths=(64,), depths=(2,), dropouts=(0.0,), epochs=150, learning_rate=0.005, seed=seed),
)
actual = E.Actuals.from_records(records)
print(f"{'framework':<32}{'RMSE':>8}{'MAE':>8}{'MAPE':>8}  (percent)   fit time")
for name in ("constant", "satellite", "deep-bayes-lwta"):
    fw = F.Framework.parse(name)
    t0 = time.perf_counter()
    fitted = F.fit(fw, train, valid if fw.is_deep else None, options)
    took = time.perf_counter() - t0
    proj, _ = F.project_all(fitted, records, macro, (Quarter(2014, 1), Quarter(2014, 4)))
    pred = np.array([p.predicted_car for p in proj])
    real = np.array([actual.car[(p.bank_id, p.target_quarter)] for p in proj])
    print(f"{fw.label:<32}{100 * E.rmse(pred, real):8.2f}{100 * E.mae(pred, real):8.2f}"
          f"{100 * E.mape(pred, real):8.2f}{took:20.1f}s")
