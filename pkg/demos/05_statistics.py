"""Paired t-tests as used to compare methods and seeds."""

from scipy import stats as sps  # only for comparison

from memloc.stats import DegenerateSampleError, mean_stderr, paired_t_one_tailed, paired_t_two_tailed, t_sf

# five paired differences 1..5
a, b = [1.0, 2.0, 3.0, 4.0, 5.0], [0.0] * 5
res = paired_t_one_tailed(a, b, "greater")
print("one-tailed:", res)
print("scipy:     ", sps.ttest_rel(a, b, alternative="greater"))
print("two-tailed:", paired_t_two_tailed(a, b))
print("mean, stderr:", mean_stderr(a))

# the Student-t tail comes from an in-repo incomplete beta
for t, df in ((1.0, 3), (2.5, 10), (4.2426, 4)):
    print(f"P(T_{df} > {t}) = {t_sf(t, df):.6f}   scipy {sps.t.sf(t, df):.6f}")

# identical differences leave no variance to test against
try:
    paired_t_one_tailed([1.5, 2.5, 3.5], [1.0, 2.0, 3.0])
except DegenerateSampleError as e:
    print("degenerate:", e)
