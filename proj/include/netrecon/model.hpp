#pragma once

#include <Eigen/Dense>
#include <string>
#include <unordered_set>
#include <vector>

#include "netrecon/error.hpp"

namespace netrecon {

enum class CovariateKind { nodal_sender, nodal_receiver, dyadic };
enum class Transform { identity, log, log1p };

inline const char* kind_name(CovariateKind k) {
    switch (k) {
        case CovariateKind::nodal_sender: return "nodal-sender";
        case CovariateKind::nodal_receiver: return "nodal-receiver";
        case CovariateKind::dyadic: return "dyadic";
    }
    return "?";
}

struct CovariateSpec {
    std::string name;
    CovariateKind kind = CovariateKind::dyadic;
    Transform transform = Transform::identity;
    std::string source;  // data column to read; empty means `name`, "lag" means previous-period flows
};

struct ModelSpec {
    std::vector<CovariateSpec> covariates;
    bool include_sender_effects = true;
    bool include_receiver_effects = true;
    bool random_effects = false;

    void validate() const {
        std::unordered_set<std::string> names;
        for (const auto& c : covariates)
            require(names.insert(c.name).second, ErrorCategory::validation,
                    "duplicate covariate name '" + c.name + "'");
    }
};

// Coefficients reported with the normalization sum(delta)=0, sum(gamma)=0 over
// the nodes present in the reduced problem; the common level sits in the
// intercept and beta is on the original covariate scale.
struct Theta {
    Eigen::VectorXd delta;  // length n, zero for nodes whose sender margin was dropped
    Eigen::VectorXd gamma;  // length n
    Eigen::VectorXd beta;   // length l
    double intercept = 0.0;
    std::vector<std::string> beta_names;
};

struct VarianceComponents {
    double sigma2_delta = 0.0;
    double sigma2_gamma = 0.0;
    double sigma_dg = 0.0;  // same-node sender/receiver covariance
    bool boundary = false;  // optimizer stopped at the PSD-cone boundary

    bool psd() const {
        return sigma2_delta >= 0.0 && sigma2_gamma >= 0.0 &&
               sigma2_delta * sigma2_gamma - sigma_dg * sigma_dg >= -1e-12;
    }
};

}  // namespace netrecon
