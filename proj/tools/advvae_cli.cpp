#include "advvae/experiment.hpp"

int main(int argc, char** argv) {
    return advvae::run_cli(argc, argv);
}
