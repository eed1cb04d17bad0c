// Writes a deterministic English-like ASCII corpus for experiments without
// network access.
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mixsga/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic text corpus"};
  std::string out;
  std::size_t bytes = 1 << 20;
  std::uint64_t seed = 7;
  app.add_option("--out", out, "Output file")->required();
  app.add_option("--bytes", bytes, "Corpus size in bytes");
  app.add_option("--seed", seed, "Generator seed");
  CLI11_PARSE(app, argc, argv);
  std::ofstream f(out, std::ios::binary);
  if (!f) {
    std::cerr << "error: cannot write " << out << '\n';
    return 1;
  }
  const auto text = mixsga::synthetic_text(bytes, seed);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  return 0;
}
