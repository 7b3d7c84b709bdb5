#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "kfatt/cli.hpp"

extern char** environ;

int main(int argc, char** argv) {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    const std::string kv = *e;
    const auto eq = kv.find('=');
    if (eq != std::string::npos) env.emplace(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return kfatt::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr, env);
}
