"""
Plot the preference accuracy of a coefficient sweep.

Write the sweep as netCDF first:

    avforge sweep --base base.safetensors --av medical.safetensors \
        --dataset medical-test.jsonl --grid=-1:1:0.1 --netcdf sweep.nc

The file holds the fraction of records won by each level (`fraction`,
dimensions coefficient x level), the corpus mean log-probabilities
(`mean_logprob`) and the dominant level per coefficient (`dominant`). The
domain is stored in the `domain` attribute.

Conventions (see docs/conventions.md for details):
- Positive coefficients move the model along the alignment vector, i.e.
  towards the behavior the aligned checkpoint was trained for; negative
  coefficients move it the opposite way.
- A level is dominant if it wins the largest fraction of records and that
  fraction exceeds 1/3.

Usage:
    python plot_sweep.py path/to/sweep.nc
"""

import sys

import matplotlib.pyplot as plt
import xarray as xr

filename = sys.argv[1] if len(sys.argv) > 1 else "sweep.nc"
ds = xr.load_dataset(filename)

print(f"Domain:       {ds.attrs['domain']}")
print(f"Coefficients: {ds.coefficient.data.min():+.2f} ... {ds.coefficient.data.max():+.2f}")
for coefficient, dominant in zip(ds.coefficient.data, ds.dominant.data):
    print(f"  {coefficient:+.2f}  {dominant}")

labels = {"exp": "Expert", "gen": "Generic", "avd": "Avoidance"}

fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
for level, label in labels.items():
    ax1.plot(ds.coefficient, ds.fraction.sel(level=level), "o-", label=label)
    ax2.plot(ds.coefficient, ds.mean_logprob.sel(level=level), "o-", label=label)
ax1.axhline(1 / 3, color="gray", linestyle=":")
ax1.set_xlabel("Coefficient")
ax1.set_ylabel("Preference accuracy")
ax2.set_xlabel("Coefficient")
ax2.set_ylabel("Mean log-probability")
ax1.legend()

fig.tight_layout()
plt.show()
