// dodem: command-line runner for the experiment stages.
//
// Exit codes: 0 success, 2 input error, 3 numeric failure, 1 anything else.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "dodem/dodem.hpp"

namespace {

using nlohmann::json;

constexpr const char* kOutputEnv = "DODEM_OUTPUT_ROOT";

// Leaf keys of the manifest in "section.key" form.
void collect_leaves(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [key, value] : j.items()) {
    const std::string name = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) collect_leaves(value, name, out);
    else out.push_back(name);
  }
}

json parse_override(const std::string& text, const json& current) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
  }
  if (!current.is_array()) return text;
  json arr = json::array();
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      arr.push_back(json::parse(item));
    } catch (const json::parse_error&) {
      arr.push_back(item);
    }
  }
  return arr;
}

json::json_pointer pointer_for(const std::string& dotted) {
  std::string p;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) p += "/" + part;
  return json::json_pointer(p);
}

struct Overrides {
  std::map<std::string, std::string> values;
};

void register_overrides(CLI::App& app, Overrides& o) {
  std::vector<std::string> leaves;
  collect_leaves(json(dodem::Manifest{}), "", leaves);
  for (const auto& name : leaves) {
    app.add_option_function<std::string>("--" + name, [&o, name](const std::string& v) { o.values[name] = v; },
                                         "override manifest key " + name)
        ->group("Manifest overrides");
  }
}

dodem::Manifest resolve_manifest(const std::string& file, const Overrides& o) {
  json j = file.empty() ? json(dodem::Manifest{}) : json(dodem::load_manifest(file));
  for (const auto& [name, text] : o.values) {
    const auto ptr = pointer_for(name);
    j[ptr] = parse_override(text, j[ptr]);
  }
  dodem::Manifest m;
  try {
    m = j.get<dodem::Manifest>();
  } catch (const json::exception& e) {
    throw dodem::InputError(std::string("manifest override: ") + e.what());
  }
  if (const char* root = std::getenv(kOutputEnv); root && *root && !o.values.count("output")) m.output = root;
  return m;
}

void print_summary(const dodem::Workspace& ws, const std::string& stage) {
  std::cout << stage << " ok: " << ws.root().string() << " (config " << ws.hash().substr(0, 16) << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DODEM double-defense RUL experiment runner"};
  app.require_subcommand(1);
  std::string manifest_file;
  bool quiet = false;
  Overrides overrides;
  app.add_option("-m,--manifest", manifest_file, "experiment manifest (JSON)")->check(CLI::ExistingFile);
  app.add_flag("-q,--quiet", quiet, "suppress progress messages");
  register_overrides(app, overrides);

  struct Stage {
    const char* name;
    const char* help;
    void (*run)(const dodem::Workspace&);
  };
  const Stage stages[] = {
      {"ingest", "parse, label, split, normalize and window every dataset", dodem::ingest},
      {"train", "train target and substitute models (existing checkpoints are kept)", dodem::train_models},
      {"attack", "craft perturbed test sets and attack masks", dodem::attack_stage},
      {"detect", "fit features and sweep OCSVM/LOF; calibrate the pipeline detector", dodem::detect_stage},
      {"transfer", "transferability matrices and substitute ranking", dodem::transfer_stage},
      {"retrain", "adversarial retraining of the target models", dodem::retrain_stage},
      {"dodem", "evaluate standard, adversarial and DODEM strategies", dodem::dodem_stage},
      {"report", "index every output with its SHA-256", dodem::report_stage},
      {"all", "run every stage in order", dodem::run_all},
  };
  for (const auto& s : stages) app.add_subcommand(s.name, s.help);

  std::string attack_method;
  double attack_ratio = -1.0;
  auto* attack = app.get_subcommand("attack");
  attack->add_option("--method", attack_method, "report one cell: attack method");
  attack->add_option("--ratio", attack_ratio, "report one cell: adversarial ratio")->check(CLI::Range(0.0, 1.0));

  std::string synth_out;
  std::uint64_t synth_seed = dodem::DataSection{}.synthetic_seed;
  std::vector<std::string> synth_sets{"FD001", "FD002", "FD003", "FD004"};
  auto* synth = app.add_subcommand("synth", "write synthetic C-MAPSS-format files");
  synth->add_option("-o,--out", synth_out, "destination directory")->required();
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--datasets", synth_sets, "subsets to write")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) {
      dodem::fs::create_directories(synth_out);
      for (const auto& id : synth_sets) {
        const auto s = dodem::synthetic::generate(id, synth_seed);
        dodem::synthetic::write_subset(s, synth_out, id);
        std::cout << id << ": " << s.train.units.size() << " train / " << s.test.units.size() << " test units\n";
      }
      return 0;
    }
    const dodem::Manifest m = resolve_manifest(manifest_file, overrides);
    dodem::Workspace ws(m, quiet ? dodem::Workspace::Log{} : dodem::Workspace::default_log());
    for (const auto& s : stages) {
      if (!app.got_subcommand(s.name)) continue;
      s.run(ws);
      if (std::string(s.name) == "attack" && !attack_method.empty() && attack_ratio >= 0.0) {
        const auto p = dodem::load_perturbed(ws, attack_method, attack_ratio);
        std::cout << attack_method << " rho=" << dodem::format_double(attack_ratio) << ": " << p.attacked_count() << "/"
                  << p.samples.size() << " attacked -> " << ws.attack_dir(attack_method, attack_ratio).string() << "\n";
      }
      print_summary(ws, s.name);
    }
    return 0;
  } catch (const dodem::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const dodem::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
