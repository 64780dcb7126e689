"""A five-replicate simulation study with the default settings.

The acceptance suite runs the same harness with 50 replicates; this keeps it
to a couple of minutes.  Run:  python3 demos/mini_study.py
"""

import pgsmm

design = pgsmm.get_preset("table1-50x11").with_(replicates=5)
results = pgsmm.run_replicates(design)
rep = pgsmm.summarize(design, results)

print(f"replicates {rep.replicates}, failures {rep.failures}")
print(f"mean error norm {rep.mse:.3f}, mean squared error {rep.mean_squared_error:.3f}")
print(f"C {rep.C:.2f} of {design.p - 3}, I {rep.I:.2f}")
print(f"under/correct/over fit {rep.under_fit:.2f}/{rep.correct_fit:.2f}/{rep.over_fit:.2f}")
for k in range(3):
    print(f"beta{k + 1}: bias {rep.bias[k]:.3f}  SD1 {rep.sd1[k]:.3f}  SD2 {rep.sd2[k]:.3f}  CP {rep.cp[k]:.2f}")
print("lambda chosen per replicate:", [round(x, 3) for x in rep.lambda_opt])
