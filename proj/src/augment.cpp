#include "memecap/augment.hpp"

#include "memecap/corpus.hpp"
#include "memecap/error.hpp"
#include "memecap/io.hpp"

#include <cmath>
#include <random>
#include <sstream>

namespace memecap {

AugmentOp AugmentOp::make_crop(double x0, double y0, double x1, double y1) {
    AugmentOp op;
    op.kind = Kind::crop;
    op.crop = {x0, y0, x1, y1};
    for (double f : op.crop) {
        if (!(f >= 0.0 && f <= 1.0)) {
            throw ValidationError("crop fractions must lie in [0, 1]");
        }
    }
    if (!(x0 < x1 && y0 < y1)) {
        throw ValidationError("crop fractions define an empty region");
    }
    return op;
}

AugmentOp AugmentOp::make_rotate(int degrees) {
    if (degrees % 90 != 0 || degrees < 0 || degrees >= 360) {
        throw ValidationError("rotation must be 0, 90, 180 or 270 degrees");
    }
    AugmentOp op;
    op.kind = Kind::rotate;
    op.angle = degrees;
    return op;
}

std::string AugmentOp::describe() const {
    std::ostringstream os;
    switch (kind) {
    case Kind::identity:
        os << "identity";
        break;
    case Kind::rotate:
        os << "rotate:" << angle;
        break;
    case Kind::crop:
        os << "crop:" << crop[0] << "," << crop[1] << "," << crop[2] << "," << crop[3];
        break;
    }
    return os.str();
}

Image rotate_right_angle(const Image &img, int degrees) {
    const int turns = ((degrees / 90) % 4 + 4) % 4;
    if (degrees % 90 != 0) {
        throw ValidationError("rotation must be a multiple of 90 degrees");
    }
    Image cur = img;
    for (int t = 0; t < turns; ++t) {
        Image next(cur.height, cur.width);
        // clockwise: (x, y) -> (H - 1 - y, x)
        for (int y = 0; y < cur.height; ++y) {
            for (int x = 0; x < cur.width; ++x) {
                for (int c = 0; c < 3; ++c) {
                    next.at(cur.height - 1 - y, x, c) = cur.at(x, y, c);
                }
            }
        }
        cur = std::move(next);
    }
    return cur;
}

std::vector<Image> augment_image(const Image &subimage, const std::vector<AugmentOp> &ops) {
    if (subimage.empty()) {
        throw ValidationError("augment_image: empty sub-image");
    }
    std::vector<Image> out;
    out.reserve(ops.size());
    for (const AugmentOp &op : ops) {
        switch (op.kind) {
        case AugmentOp::Kind::identity:
            out.push_back(subimage);
            break;
        case AugmentOp::Kind::rotate:
            out.push_back(rotate_right_angle(subimage, op.angle));
            break;
        case AugmentOp::Kind::crop: {
            const int x0 = static_cast<int>(std::floor(op.crop[0] * subimage.width + 1e-9));
            const int y0 = static_cast<int>(std::floor(op.crop[1] * subimage.height + 1e-9));
            const int x1 = static_cast<int>(std::ceil(op.crop[2] * subimage.width - 1e-9));
            const int y1 = static_cast<int>(std::ceil(op.crop[3] * subimage.height - 1e-9));
            if (x1 <= x0 || y1 <= y0) {
                throw ValidationError("augment_image: crop " + op.describe() + " collapses to zero pixels");
            }
            out.push_back(crop(subimage, RoiBox{x0, y0, x1, y1, 0}));
            break;
        }
        }
    }
    return out;
}

std::vector<AugmentOp> plan_augmentations(int count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> kind(0, 1);
    std::uniform_int_distribution<int> quarter(1, 3);
    std::uniform_real_distribution<double> margin(0.0, 0.15);
    std::vector<AugmentOp> ops;
    for (int i = 0; i < count; ++i) {
        if (kind(rng) == 0) {
            const double a = margin(rng), b = margin(rng), c = margin(rng), d = margin(rng);
            ops.push_back(AugmentOp::make_crop(a, b, 1.0 - c, 1.0 - d));
        } else {
            ops.push_back(AugmentOp::make_rotate(90 * quarter(rng)));
        }
    }
    return ops;
}

SynonymTableParaphraser SynonymTableParaphraser::from_text(std::string_view tsv) {
    std::map<std::string, std::string> table;
    std::istringstream in{std::string(tsv)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 == line.size()) {
            throw ValidationError("synonym table line " + std::to_string(lineno) + ": expected source<TAB>target");
        }
        table[line.substr(0, tab)] = line.substr(tab + 1);
    }
    return SynonymTableParaphraser(std::move(table));
}

SynonymTableParaphraser SynonymTableParaphraser::from_file(const std::filesystem::path &path) {
    return from_text(read_file(path));
}

std::string SynonymTableParaphraser::paraphrase(std::string_view text) const {
    std::string out;
    std::size_t i = 0;
    auto is_space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
    auto is_punct = [](char c) {
        const auto u = static_cast<unsigned char>(c);
        return u < 0x80 && std::ispunct(u) != 0;
    };
    while (i < text.size()) {
        if (is_space(text[i])) {
            out.push_back(text[i++]);
            continue;
        }
        std::size_t j = i;
        while (j < text.size() && !is_space(text[j])) {
            ++j;
        }
        std::string_view word = text.substr(i, j - i);
        std::size_t a = 0, b = word.size();
        while (a < b && is_punct(word[a])) {
            ++a;
        }
        while (b > a && is_punct(word[b - 1])) {
            --b;
        }
        const std::string core(word.substr(a, b - a));
        auto it = table_.find(core);
        out += word.substr(0, a);
        out += it != table_.end() ? it->second : core;
        out += word.substr(b);
        i = j;
    }
    return out;
}

std::string augment_text(std::string_view caption, const Paraphraser &paraphraser) {
    if (caption.empty()) {
        throw ValidationError("augment_text: empty caption");
    }
    std::string out = paraphraser.paraphrase(caption);
    if (out.empty()) {
        throw ValidationError("paraphraser '" + paraphraser.name() + "' returned empty text");
    }
    return out;
}

} // namespace memecap
