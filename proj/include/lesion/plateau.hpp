#pragma once

#include <optional>

namespace lesion {

struct PlateauPolicy {
  int patience = 10;
  double factor = 0.01;

  /// Throws std::invalid_argument unless patience >= 1 and factor in (0,1).
  void validate() const;
};

enum class PlateauAction { improved, waiting, reduce_lr, stop };

/// Learning-rate plateau schedule with early stopping. A value counts as an
/// improvement only if it is strictly greater than the best so far. After
/// `patience` epochs without improvement the rate is multiplied by `factor`
/// once; the next plateau ends training.
class PlateauController {
public:
  PlateauController(PlateauPolicy policy, double initial_lr);

  PlateauAction observe(double monitored);

  double lr() const { return lr_; }
  int reductions() const { return reductions_; }
  std::optional<double> best() const { return best_; }
  bool stopped() const { return stopped_; }

private:
  PlateauPolicy policy_;
  double lr_;
  std::optional<double> best_;
  int wait_ = 0;
  int reductions_ = 0;
  bool stopped_ = false;
};

}  // namespace lesion
