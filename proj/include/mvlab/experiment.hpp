#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mvlab/functionals.hpp"
#include "mvlab/models.hpp"
#include "mvlab/simulate.hpp"

namespace mvlab {

/// Invalid experiment file: bad syntax, unknown key or out-of-range value.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The experiment kinds, in CLI spelling.
const std::vector<std::string>& experiment_kinds();

/// Parses JSON text; syntax errors become ConfigError with line and column.
nlohmann::json parse_config_text(const std::string& text);

/**
 * @brief Validates a raw experiment document and fills in every default.
 *
 * Unknown keys raise ConfigError naming the full key path. The result is a
 * fixed point: resolving a resolved config returns it unchanged. `kind`
 * supplies the experiment when the document has none and must agree with it
 * otherwise; `seed` overrides the document's seed.
 */
nlohmann::json resolve_config(const nlohmann::json& raw, const std::optional<std::string>& kind = std::nullopt,
                              const std::optional<std::uint64_t>& seed = std::nullopt);

/// Builders from resolved sub-documents.
CoefficientModel model_from_config(const nlohmann::json& model, double r0);
InitialLaw init_from_config(const nlohmann::json& init);
PathFunctional functional_from_config(const nlohmann::json& f);
CameronMartinVector eta_from_config(const nlohmann::json& eta, const PathGrid& grid, int dim);
TestFunction test_function_from_config(const nlohmann::json& f);

/// CSV files written by an experiment kind, in writing order.
std::vector<std::string> experiment_outputs(const std::string& kind);

/**
 * Runs a resolved experiment: writes manifest.json into `out_dir`, then the
 * CSV files, and prints a one-line summary to `summary`.
 */
void run_experiment(const nlohmann::json& resolved, const std::filesystem::path& out_dir, std::ostream& summary);

/// %.17g formatting used for every CSV value.
std::string format_value(double v);

}  // namespace mvlab
