#include "fedgfm/experiment.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return fedgfm::exp::run_cli(args);
}
