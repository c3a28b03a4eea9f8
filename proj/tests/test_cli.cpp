#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "doctest.h"
#include "msca/eval.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "msca_cli_test";

struct Run {
    int code;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

Run run(const std::string& args) {
    const fs::path out = kWork / "stdout.txt", err = kWork / "stderr.txt";
    const std::string cmd = "cd '" + kWork.string() + "' && '" MSCA_CLI_PATH "' " + args + " >'" + out.string() +
                            "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

const char* kTinyConfig = R"(model.levels = 2
model.classes = 3
model.image_channels = 4
model.label_width = 4
model.backbone_channels = 4,4,4
model.attention_slots = 2,2,2
model.decoder_channels = 4,4,4
model.spade_hidden = 3
model.disc_channels = 4,4
patch = 16
max_steps = 4
precision = 64
)";

struct Workspace {
    Workspace() {
        fs::remove_all(kWork);
        fs::create_directories(kWork);
        std::ofstream(kWork / "tiny.cfg") << kTinyConfig;
    }
    ~Workspace() { fs::remove_all(kWork); }
};

}  // namespace

TEST_CASE("usage errors exit 1 with usage text on stderr") {
    Workspace ws;
    const Run none = run("");
    CHECK(none.code == 1);
    CHECK(none.err.find("Usage: msca") != std::string::npos);
    CHECK(none.out.empty());
    CHECK(run("frobnicate").code == 1);
    CHECK(run("synth --label missing.png").code == 1);
    CHECK(run("train --config tiny.cfg --set bogus=1 --out r").code == 1);
    CHECK(run("--help").code == 0);
}

TEST_CASE("gen-data writes one image and one label map per scene") {
    Workspace ws;
    const Run r = run("gen-data --n 8 --extent 128 --classes 4 --out data --seed 2");
    REQUIRE(r.code == 0);
    int files = 0;
    for (const auto& e : fs::directory_iterator(kWork / "data")) files += e.path().extension() == ".png" ? 1 : 0;
    CHECK(files == 16);
    CHECK(fs::exists(kWork / "data" / "scene_0007_label.png"));
    CHECK(run("gen-data --n 8 --extent 128 --classes 4 --out data2 --seed 2").code == 0);
    CHECK(slurp(kWork / "data" / "scene_0003.png") == slurp(kWork / "data2" / "scene_0003.png"));
}

TEST_CASE("gradcheck reports failures through the exit code") {
    Workspace ws;
    const Run ok = run("gradcheck --seed 4");
    CHECK(ok.code == 0);
    CHECK(ok.out.find("0 failed") != std::string::npos);
    CHECK(ok.out.find("generator") != std::string::npos);
    const Run bad = run("gradcheck --seed 4 --include-broken");
    CHECK(bad.code != 0);
    CHECK(bad.out.find("FAIL broken_square") != std::string::npos);
}

TEST_CASE("training and inference are bit-reproducible from the seed") {
    Workspace ws;
    REQUIRE(run("gen-data --n 4 --extent 32 --classes 3 --out data --seed 1").code == 0);
    REQUIRE(run("train --config tiny.cfg --data data --out a --seed 5").code == 0);
    REQUIRE(run("train --config tiny.cfg --data data --out b --seed 5").code == 0);
    REQUIRE(run("train --config tiny.cfg --data data --out c --seed 6").code == 0);
    CHECK(slurp(kWork / "a" / "final.ckpt") == slurp(kWork / "b" / "final.ckpt"));
    CHECK(slurp(kWork / "a" / "final.ckpt") != slurp(kWork / "c" / "final.ckpt"));
    CHECK(slurp(kWork / "a" / "final.ckpt").substr(0, 5) == "MSCAD");
    const std::string log = slurp(kWork / "a" / "metrics.log");
    CHECK(log.find("step=3 task=self") != std::string::npos);

    const std::string synth = "synth --label data/scene_0001_label.png --exemplar data/scene_0002.png "
                              "--exemplar-label data/scene_0002_label.png --checkpoint a/final.ckpt";
    REQUIRE(run(synth + " --out s1.png --dump-attention att").code == 0);
    REQUIRE(run(synth + " --out s2.png").code == 0);
    CHECK(slurp(kWork / "s1.png") == slurp(kWork / "s2.png"));
    CHECK(fs::exists(kWork / "att" / "scale_0" / "alpha_k00.png"));
    CHECK(fs::exists(kWork / "att" / "scale_2" / "gates.txt"));

    const std::string interp = "interpolate --label data/scene_0001_label.png --exemplar data/scene_0002.png "
                               "--exemplar-label data/scene_0002_label.png --exemplar2 data/scene_0003.png "
                               "--exemplar2-label data/scene_0003_label.png --checkpoint a/final.ckpt";
    CHECK(run(interp + " --a 0.5 --out i.png").code == 0);
    CHECK(run(interp + " --weight-map ramp --out r.png").code == 0);
    CHECK(run(interp + " --out n.png").code == 1);
    CHECK(run(interp + " --a 0.5 --weight-map ramp --out n.png").code == 1);

    REQUIRE(run("gen-data --n 1 --extent 64 --classes 3 --out big --seed 9").code == 0);
    const std::string extra = "extrapolate --center data/scene_0000.png --center-label data/scene_0000_label.png "
                              "--checkpoint a/final.ckpt --global-label ";
    REQUIRE(run(extra + "big/scene_0000_label.png --seed 3 --out e1.png").code == 0);
    REQUIRE(run(extra + "big/scene_0000_label.png --seed 3 --out e2.png").code == 0);
    CHECK(slurp(kWork / "e1.png") == slurp(kWork / "e2.png"));
    const Run wrong = run(extra + "data/scene_0001_label.png --out e3.png");
    CHECK(wrong.code == 2);
    CHECK(wrong.err.find("twice the center extent") != std::string::npos);

    CHECK(run("swap --scenes data --checkpoint a/final.ckpt --out grid.png").code == 0);
    CHECK(fs::exists(kWork / "grid.png"));

    REQUIRE(run("eval --task duplicate --data data --checkpoint a/final.ckpt --out res.txt").code == 0);
    REQUIRE(run("eval --task mirror --data data --checkpoint a/final.ckpt --out res.txt").code == 0);
    const auto results = msca::read_eval_results(kWork / "res.txt");
    REQUIRE(results.size() == 2);
    CHECK(results[0].task == "duplicate");
    CHECK(results[1].samples.size() == 4);
}

TEST_CASE("resume continues a run to the same end state") {
    Workspace ws;
    REQUIRE(run("gen-data --n 4 --extent 32 --classes 3 --out data --seed 1").code == 0);
    REQUIRE(run("train --config tiny.cfg --data data --out full --seed 5 --set checkpoint_every=2").code == 0);
    REQUIRE(run("train --config tiny.cfg --data data --out part --seed 5 --resume full/step_2.ckpt").code == 0);
    CHECK(slurp(kWork / "full" / "final.ckpt") == slurp(kWork / "part" / "final.ckpt"));
}

TEST_CASE("bench prints agreement and slopes") {
    Workspace ws;
    const Run r = run("bench --sides 8,16 --slots 2 --reps 1 --channels 4 --label-width 4");
    CHECK(r.code == 0);
    CHECK(r.out.find("agreed yes") != std::string::npos);
    CHECK(run("bench --sides 8").code == 1);
}
