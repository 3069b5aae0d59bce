#include "ettk/eval.hpp"

#include <fstream>
#include <iomanip>

#include <json.hpp>

namespace ettk {

void write_sequence_csv(const std::string& path, const SequenceResult& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "frame,iou,center_err\n";
  out << std::setprecision(9);
  for (const auto& f : r.frames) out << f.frame << "," << f.iou << "," << f.center_err << "\n";
}

void write_summary_json(const std::string& path, const SequenceResult& r) {
  nlohmann::json j;
  j["ao"] = r.ao;
  j["auc"] = r.auc;
  j["precision"] = r.precision;
  j["frames"] = r.frames.size();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(2) << "\n";
}

}  // namespace ettk
