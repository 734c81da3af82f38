"""
Simulating pathway-structured data and fitting the factor model
================================================================

Draw a synthetic expression matrix whose loadings are partly explained by
random gene sets, fit the model, and look at what comes back.
"""

import numpy as np

import basil

design = basil.preset("high-signal", n=300, p=600, q=60)
C = basil.generate_random_genesets(design.p, design.q, design.density, design.min_genes, seed=1)
Y, truth = basil.generate_synthetic(design, C, seed=2)
print(f"Y is {Y.shape[0]} x {Y.shape[1]}, {C.n_sets} gene sets")

# number of factors by JIC, then the closed-form posterior
result = basil.fit(Y, C, k_max=20)
print(f"k = {result.k}")
print(f"tau_gamma^2 = {result.hyper.tau_gamma_sq:.3g}, tau_psi^2 = {result.hyper.tau_psi_sq:.3g}")
print(f"coverage correction rho = {result.hyper.rho:.3g}")

# the residual block is orthogonal to every gene set
print("max |C^T psi_bar|:", np.abs(C.membership.T @ result.psi_bar).max())

# point estimate of the covariance versus the spectral plug-in
err_basil = basil.relative_frobenius_error(result.lambda_bar, truth)
err_spectral = basil.relative_frobenius_error(basil.spectral_baseline(Y, result.k), truth)
print(f"relative error: basil {err_basil:.4f}, spectral {err_spectral:.4f}")

# posterior draws are independent, so intervals come straight from quantiles
draws = basil.sample_posterior(result, 500, seed=3)
print("coverage of Lambda0 Lambda0^T on 100 genes:",
      basil.coverage_rate(draws, truth, submatrix_size=100))

summary = basil.correlation_intervals(draws, range(40))
print(f"{summary.masked_fraction():.1%} of gene pairs have intervals containing zero")

# held-out likelihood through the low-rank plus diagonal covariance
Y_test = basil.sample_from_truth(truth, 100, seed=4, gene_ids=Y.gene_ids)
cov = basil.covariance_posterior_mean(result)
print(f"held-out log-likelihood per sample: {basil.oos_loglik(cov, Y_test) / 100:.1f}")
