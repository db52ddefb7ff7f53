#include "lesion/plateau.hpp"

#include <stdexcept>

namespace lesion {

void PlateauPolicy::validate() const {
  if (patience < 1) throw std::invalid_argument("plateau patience must be >= 1");
  if (!(factor > 0.0 && factor < 1.0))
    throw std::invalid_argument("plateau factor must lie in (0, 1)");
}

PlateauController::PlateauController(PlateauPolicy policy, double initial_lr)
    : policy_(policy), lr_(initial_lr) {
  policy_.validate();
  if (!(initial_lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
}

PlateauAction PlateauController::observe(double monitored) {
  if (stopped_) return PlateauAction::stop;
  if (!best_ || monitored > *best_) {
    best_ = monitored;
    wait_ = 0;
    return PlateauAction::improved;
  }
  if (++wait_ < policy_.patience) return PlateauAction::waiting;
  wait_ = 0;
  if (reductions_ == 0) {
    lr_ *= policy_.factor;
    ++reductions_;
    return PlateauAction::reduce_lr;
  }
  stopped_ = true;
  return PlateauAction::stop;
}

}  // namespace lesion
