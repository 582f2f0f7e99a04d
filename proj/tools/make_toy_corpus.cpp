#include <iostream>

#include <CLI11.hpp>

#include "dmd/toyfaces.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Render the procedural toy face corpus", "dmd_toycorpus"};
    dmd::toy::CorpusSpec spec;
    std::string out;
    app.add_option("--out", out, "Output root")->required();
    app.add_option("--identities", spec.identities, "Number of identities")->capture_default_str();
    app.add_option("--images", spec.images_per_identity, "Images per identity")->capture_default_str();
    app.add_option("--size", spec.size, "Image size")->capture_default_str();
    app.add_option("--seed", spec.seed, "Corpus seed")->capture_default_str();
    CLI11_PARSE(app, argc, argv);
    try {
        dmd::toy::write_corpus(out, spec);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    std::cout << "wrote " << spec.identities << " identities to " << out << '\n';
    return 0;
}
