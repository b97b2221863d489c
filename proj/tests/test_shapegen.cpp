#include "fssd/png.hpp"
#include "fssd/shapegen.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <bitset>
#include <filesystem>
#include <fstream>
#include <set>
#include <unordered_set>

using namespace fssd;
using namespace fssd::shapegen;

namespace {

// counterclockwise quarter turn of a square raster, matching rot90_hw
std::vector<uint8_t> rot90_mask(const std::vector<uint8_t>& m, int S) {
    std::vector<uint8_t> out(m.size());
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j)
            out[static_cast<size_t>(i) * S + j] = m[static_cast<size_t>(j) * S + (S - 1 - i)];
    return out;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("class library has 25 deterministic classes", "[shapegen]") {
    const auto lib = generate_class_library();
    REQUIRE(lib.size() == 25);
    std::set<std::string> names;
    for (const auto& c : lib) names.insert(c.name);
    CHECK(names.size() == 25);
    CHECK(names.count("line") == 1);
    CHECK(names.count("circle") == 1);
    CHECK(names.count("star8") == 1);
    CHECK(names.count("crescent") == 1);
}

TEST_CASE("render is deterministic in (class_id, seed, H, W)", "[shapegen]") {
    for (int cid : {0, 4, 8, 14, 19}) {
        const auto a = render_sample(cid, 12345, 32, 32);
        const auto b = render_sample(cid, 12345, 32, 32);
        CHECK(a.image == b.image);
        CHECK(a.mask == b.mask);
        CHECK(a.edge == b.edge);
        CHECK(a.params.to_json() == b.params.to_json());
        const auto c = render_sample(cid, 12346, 32, 32);
        CHECK(a.mask != c.mask); // different seeds should differ (high probability)
    }
}

TEST_CASE("100 samples per class give 100 distinct parameter tuples", "[shapegen]") {
    for (int cid = 0; cid < kNumClasses; ++cid) {
        std::unordered_set<std::string> seen;
        for (int i = 0; i < 100; ++i)
            seen.insert(render_sample(cid, sample_seed_for(7, cid, i), 32, 32).params.to_json().dump());
        CHECK(seen.size() == 100);
    }
}

TEST_CASE("circle mask area matches analytic area within 8%", "[shapegen]") {
    ShapeParams p;
    p.cx = 16.0;
    p.cy = 16.0;
    p.scale = 20.0; // radius 10
    p.rotation = 0.0;
    p.fg = 1.0;
    p.bg = 0.0;
    const auto s = render_from_params(8, p, 32, 32);
    int area = 0;
    for (auto v : s.mask) area += v;
    const double analytic = kPi * 10.0 * 10.0;
    CHECK(std::abs(area - analytic) / analytic < 0.08);
}

TEST_CASE("mask/edge invariants across all classes", "[shapegen]") {
    // 10,000 random samples: edge subset of boundary, one component, margin
    const int per_class = 400;
    for (int cid = 0; cid < kNumClasses; ++cid) {
        for (int i = 0; i < per_class; ++i) {
            const auto s = render_sample(cid, sample_seed_for(99, cid, i), 32, 32);
            int mask_count = 0, edge_count = 0;
            for (size_t k = 0; k < s.mask.size(); ++k) {
                mask_count += s.mask[k];
                edge_count += s.edge[k];
            }
            REQUIRE(edge_count > 0);
            REQUIRE(edge_count < mask_count);
            // every edge pixel is a mask pixel with at least one non-mask 4-neighbour
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x) {
                    const size_t idx = static_cast<size_t>(y) * 32 + x;
                    if (!s.edge[idx]) continue;
                    REQUIRE(s.mask[idx] == 1);
                    const bool open = (y == 0 || !s.mask[idx - 32]) ||
                                      (y == 31 || !s.mask[idx + 32]) ||
                                      (x == 0 || !s.mask[idx - 1]) || (x == 31 || !s.mask[idx + 1]);
                    REQUIRE(open);
                }
            // 2 px margin
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x)
                    if (y < 2 || y > 29 || x < 2 || x > 29)
                        REQUIRE(s.mask[static_cast<size_t>(y) * 32 + x] == 0);
        }
    }
}

TEST_CASE("square re-rendered at +90 degrees equals rotated mask", "[shapegen]") {
    ShapeParams p;
    p.cx = 16.0;
    p.cy = 16.0;
    p.scale = 18.0;
    p.rotation = 0.3;
    p.fg = 1.0;
    p.bg = 0.0;
    const auto a = render_from_params(4, p, 32, 32);
    ShapeParams q = p;
    q.rotation = p.rotation + kPi / 2;
    const auto b = render_from_params(4, q, 32, 32);
    CHECK(b.mask == rot90_mask(a.mask, 32));
}

TEST_CASE("split_classes is disjoint, exhaustive, deterministic", "[shapegen]") {
    auto [tr, te] = split_classes(15, 10, 3);
    CHECK(tr.size() == 15);
    CHECK(te.size() == 10);
    std::set<int> all(tr.begin(), tr.end());
    all.insert(te.begin(), te.end());
    CHECK(all.size() == 25);

    auto [tr2, te2] = split_classes(15, 10, 3);
    CHECK(tr == tr2);
    CHECK(te == te2);

    int distinct = 0;
    auto [base_tr, base_te] = split_classes(15, 10, 0);
    for (uint64_t s = 1; s <= 20; ++s) {
        auto [t2, e2] = split_classes(15, 10, s);
        if (t2 != base_tr) distinct++;
    }
    CHECK(distinct >= 18);

    CHECK_THROWS_AS(split_classes(20, 10, 0), GenError);
}

namespace {

DatasetSplit make_dummy_split(std::vector<ShapeSample>& storage, int classes, int per_class) {
    storage.clear();
    storage.reserve(static_cast<size_t>(classes) * per_class);
    DatasetSplit sp;
    for (int c = 0; c < classes; ++c) {
        sp.class_ids.push_back(c);
        sp.samples.emplace_back();
    }
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) {
            ShapeSample s;
            s.class_id = c;
            s.seed = static_cast<uint64_t>(c * 1000 + i);
            storage.push_back(s);
        }
    for (size_t i = 0; i < storage.size(); ++i)
        sp.samples[static_cast<size_t>(storage[i].class_id)].push_back(&storage[i]);
    return sp;
}

} // namespace

TEST_CASE("episode sampling sizes and disjointness", "[shapegen]") {
    std::vector<ShapeSample> storage;
    auto split = make_dummy_split(storage, 10, 20);
    Rng rng(5);
    auto ep = sample_episode(split, 5, 1, 15, rng);
    CHECK(ep.support.size() == 5);
    CHECK(ep.query.size() == 75);
    CHECK(ep.class_map.size() == 5);
    std::set<int> used(ep.class_map.begin(), ep.class_map.end());
    CHECK(used.size() == 5);

    // support and query are disjoint sample sets
    std::set<const ShapeSample*> sup(ep.support.begin(), ep.support.end());
    for (const auto* q : ep.query) CHECK(sup.count(q) == 0);

    auto ep1 = sample_episode(split, 1, 1, 1, rng);
    CHECK(ep1.support.size() == 1);
    CHECK(ep1.query.size() == 1);
    CHECK(ep1.support[0] != ep1.query[0]);

    CHECK_THROWS_AS(sample_episode(split, 11, 1, 1, rng), GenError);
    CHECK_THROWS_AS(sample_episode(split, 2, 10, 11, rng), GenError);
}

TEST_CASE("1000 episodes cover every class", "[shapegen]") {
    std::vector<ShapeSample> storage;
    auto split = make_dummy_split(storage, 20, 4);
    Rng rng(11);
    std::set<int> seen;
    for (int e = 0; e < 1000; ++e) {
        auto ep = sample_episode(split, 5, 1, 1, rng);
        for (int c : ep.class_map) seen.insert(c);
    }
    CHECK(seen.size() == 20);
}

TEST_CASE("IoU nearest-neighbour beats chance on the 25 classes", "[shapegen]") {
    const int per_class = 100;
    struct Item {
        std::bitset<1024> bits;
        int cls;
    };
    std::vector<Item> items;
    items.reserve(25 * per_class);
    for (int cid = 0; cid < kNumClasses; ++cid)
        for (int i = 0; i < per_class; ++i) {
            const auto s = render_sample(cid, sample_seed_for(1234, cid, i), 32, 32);
            Item it;
            it.cls = cid;
            for (int k = 0; k < 1024; ++k) it.bits[static_cast<size_t>(k)] = s.mask[static_cast<size_t>(k)];
            items.push_back(it);
        }
    int correct = 0, total = 0;
    for (size_t i = 0; i < items.size(); i += 5) { // probe a fifth, 1-NN over the rest
        double best = -1;
        int best_cls = -1;
        for (size_t j = 0; j < items.size(); ++j) {
            if (j == i) continue;
            const auto inter = (items[i].bits & items[j].bits).count();
            const auto uni = (items[i].bits | items[j].bits).count();
            const double iou = uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
            if (iou > best) {
                best = iou;
                best_cls = items[j].cls;
            }
        }
        correct += best_cls == items[i].cls;
        total += 1;
    }
    const double acc = static_cast<double>(correct) / total;
    INFO("IoU 1-NN accuracy " << acc);
    CHECK(acc > 1.0 / 25.0);
}

TEST_CASE("png gray8 round trip", "[shapegen]") {
    Rng rng(77);
    std::vector<uint8_t> px(32 * 32);
    for (auto& v : px) v = static_cast<uint8_t>(rng.uniform_int(256));
    const auto bytes = png::encode_gray8(px.data(), 32, 32);
    const auto img = png::decode_gray8(bytes);
    REQUIRE(img.width == 32);
    REQUIRE(img.height == 32);
    CHECK(img.pixels == px);
}

TEST_CASE("dataset generate + load round trip and determinism", "[shapegen]") {
    namespace fs = std::filesystem;
    const std::string root = (fs::temp_directory_path() / "fssd_gen_test").string();
    fs::remove_all(root);
    GenConfig cfg;
    cfg.root = root;
    cfg.per_class = 3;
    cfg.seed = 42;
    generate_dataset(cfg);

    REQUIRE(fs::exists(root + "/manifest.jsonl"));
    auto ds = load_dataset(root);
    CHECK(ds.H == 32);
    CHECK(ds.all.size() == 75);
    CHECK(ds.train.class_ids.size() == 15);
    CHECK(ds.test.class_ids.size() == 10);
    for (const auto& per_class : ds.train.samples) CHECK(per_class.size() == 3);

    // loaded pixels match a fresh render bit for bit
    const auto& s0 = ds.all.front();
    const auto fresh = render_sample(s0.class_id, s0.seed, 32, 32);
    CHECK(s0.mask == fresh.mask);
    CHECK(s0.edge == fresh.edge);
    for (size_t i = 0; i < s0.image.size(); ++i)
        CHECK(std::abs(s0.image[i] - fresh.image[i]) <= 0.5f / 255.0f + 1e-6f);

    // regenerating produces byte-identical artifacts
    const std::string root2 = (fs::temp_directory_path() / "fssd_gen_test2").string();
    fs::remove_all(root2);
    GenConfig cfg2 = cfg;
    cfg2.root = root2;
    generate_dataset(cfg2);
    CHECK(read_file(root + "/manifest.jsonl") == read_file(root2 + "/manifest.jsonl"));
    // compare one class directory file by file
    const auto& lib = class_library();
    for (const auto& cls : lib) {
        const std::string d1 = root + "/train/" + cls.name;
        if (!fs::exists(d1)) continue;
        for (const auto& entry : fs::directory_iterator(d1)) {
            const auto rel = entry.path().filename().string();
            CHECK(read_file(entry.path().string()) ==
                  read_file(root2 + "/train/" + cls.name + "/" + rel));
        }
        break;
    }
    fs::remove_all(root);
    fs::remove_all(root2);
}
