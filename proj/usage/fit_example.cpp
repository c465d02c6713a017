// Simulate one four-covariate data set with two noisy replicates of X, then
// compare naive entropy balancing with the corrected fits.

#include <iostream>

#include "mebal/mebal.hpp"

int main() {
  mebal::ScenarioSpec spec;
  spec.design = mebal::Design::four_covariate;
  spec.error_family = mebal::ErrorDist::normal;
  spec.error_variance = 0.1;
  spec.m = 2;
  spec.n = 2000;
  const mebal::SimulatedData sim = mebal::generate(spec, 0);

  mebal::CorrectionSpec cs;
  cs.error_model = spec.correction_model();
  for (mebal::Method m : {mebal::Method::eb, mebal::Method::ceb, mebal::Method::bceb, mebal::Method::ceb_hl,
                         mebal::Method::ceb_hw}) {
    cs.method = m;
    try {
      const mebal::BalanceFit fit = mebal::estimate(sim.observed, cs);
      const mebal::ImbalanceReport rep = mebal::imbalance(fit.weights, sim.truth.covariates(), sim.truth,
                                                          mebal::ImbalanceBasis::true_covariates);
      std::cout << mebal::to_string(m) << ": att " << mebal::att(fit.weights, sim.observed) << ", theta "
                << fit.theta.transpose() << ", max ASMD on true X " << rep.max_asmd() << '\n';
    } catch (const mebal::Error& e) {
      std::cerr << mebal::to_string(m) << ": " << e.what() << '\n';
      return 1;
    }
  }
  std::cout << "true att " << mebal::kTrueAtt << '\n';
  return 0;
}
