#include "dhm/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include <zlib.h>

#include "dhm/errors.hpp"
#include "dhm/rng.hpp"

namespace dhm {

namespace {

constexpr std::uint32_t kImageMagic = 2051;  // 0x00000803
constexpr std::uint32_t kLabelMagic = 2049;  // 0x00000801

class IdxReader {
public:
    explicit IdxReader(const std::string& path) : path_(path), f_(gzopen(path.c_str(), "rb")) {
        if (!f_) throw FormatError("cannot open '" + path + "'");
    }
    ~IdxReader() {
        if (f_) gzclose(f_);
    }
    IdxReader(const IdxReader&) = delete;
    IdxReader& operator=(const IdxReader&) = delete;

    std::uint32_t read_u32(const char* field) {
        unsigned char b[4];
        read_bytes(b, 4, field);
        return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
               (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
    }

    void read_bytes(void* dst, std::size_t n, const char* field) {
        const int got = gzread(f_, dst, static_cast<unsigned>(n));
        if (got < 0 || static_cast<std::size_t>(got) != n)
            throw FormatError("'" + path_ + "': truncated while reading " + field);
    }

private:
    std::string path_;
    gzFile f_;
};

class IdxWriter {
public:
    IdxWriter(const std::string& path, bool compress)
        : path_(path), f_(gzopen(path.c_str(), compress ? "wb9" : "wbT")) {
        if (!f_) throw FormatError("cannot create '" + path + "'");
    }
    ~IdxWriter() {
        if (f_) gzclose(f_);
    }
    IdxWriter(const IdxWriter&) = delete;
    IdxWriter& operator=(const IdxWriter&) = delete;

    void write_u32(std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
        write_bytes(b, 4);
    }

    void write_bytes(const void* src, std::size_t n) {
        if (gzwrite(f_, src, static_cast<unsigned>(n)) != static_cast<int>(n))
            throw FormatError("'" + path_ + "': write failed");
    }

private:
    std::string path_;
    gzFile f_;
};

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

LabeledImageSet load_idx(const std::string& images_path, const std::string& labels_path) {
    IdxReader img(images_path);
    const std::uint32_t img_magic = img.read_u32("image magic");
    if (img_magic != kImageMagic)
        throw FormatError("'" + images_path + "': image magic is " + std::to_string(img_magic) +
                          ", expected " + std::to_string(kImageMagic));
    const std::uint32_t n = img.read_u32("image count");
    const std::uint32_t h = img.read_u32("image height");
    const std::uint32_t w = img.read_u32("image width");
    if (n == 0 || h == 0 || w == 0) throw FormatError("'" + images_path + "': zero image dimension");

    std::vector<unsigned char> raw(static_cast<std::size_t>(n) * h * w);
    img.read_bytes(raw.data(), raw.size(), "pixel data");

    IdxReader lab(labels_path);
    const std::uint32_t lab_magic = lab.read_u32("label magic");
    if (lab_magic != kLabelMagic)
        throw FormatError("'" + labels_path + "': label magic is " + std::to_string(lab_magic) +
                          ", expected " + std::to_string(kLabelMagic));
    const std::uint32_t ln = lab.read_u32("label count");
    if (ln != n)
        throw FormatError("label count " + std::to_string(ln) + " does not match image count " +
                          std::to_string(n));
    std::vector<unsigned char> lraw(ln);
    lab.read_bytes(lraw.data(), lraw.size(), "label data");

    LabeledImageSet set;
    set.images = Tensor<float>({static_cast<int>(n), 1, static_cast<int>(h), static_cast<int>(w)});
    for (std::size_t i = 0; i < raw.size(); ++i) set.images.data()[i] = raw[i] / 255.0f;
    set.labels.resize(n);
    int max_label = 0;
    for (std::uint32_t i = 0; i < ln; ++i) {
        set.labels[i] = lraw[i];
        max_label = std::max(max_label, set.labels[i]);
    }
    set.num_classes = max_label + 1;
    return set;
}

void save_idx(const std::string& images_path, const std::string& labels_path,
              const LabeledImageSet& set) {
    const int n = set.images.dim(0);
    const int h = set.images.dim(2);
    const int w = set.images.dim(3);
    if (static_cast<int>(set.labels.size()) != n)
        throw ShapeError("label count does not match image count");
    {
        IdxWriter out(images_path, ends_with(images_path, ".gz"));
        out.write_u32(kImageMagic);
        out.write_u32(static_cast<std::uint32_t>(n));
        out.write_u32(static_cast<std::uint32_t>(h));
        out.write_u32(static_cast<std::uint32_t>(w));
        std::vector<unsigned char> raw(set.images.size());
        for (std::size_t i = 0; i < raw.size(); ++i) {
            const float v = std::clamp(set.images.data()[i], 0.0f, 1.0f);
            raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
        }
        out.write_bytes(raw.data(), raw.size());
    }
    {
        IdxWriter out(labels_path, ends_with(labels_path, ".gz"));
        out.write_u32(kLabelMagic);
        out.write_u32(static_cast<std::uint32_t>(n));
        std::vector<unsigned char> raw(set.labels.begin(), set.labels.end());
        out.write_bytes(raw.data(), raw.size());
    }
}

namespace {

// Splat a point with bilinear weights; accumulates saturating at 1.
void splat(float* img, int size, double x, double y) {
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const double fx = x - x0, fy = y - y0;
    const double w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
    const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
    for (int k = 0; k < 4; ++k) {
        if (xs[k] < 0 || xs[k] >= size || ys[k] < 0 || ys[k] >= size) continue;
        float& px = img[ys[k] * size + xs[k]];
        px = std::min(1.0f, px + static_cast<float>(w[k]));
    }
}

void draw_line(float* img, int size, double x0, double y0, double x1, double y1) {
    const double len = std::hypot(x1 - x0, y1 - y0);
    const int steps = std::max(2, static_cast<int>(std::ceil(len * 2)));
    for (int t = 0; t <= steps; ++t) {
        const double a = static_cast<double>(t) / steps;
        splat(img, size, x0 + a * (x1 - x0), y0 + a * (y1 - y0));
    }
}

}  // namespace

LandmarkSet gen_landmark_task(int n, int image_size, int num_landmarks, double noise,
                              std::uint64_t seed) {
    if (image_size < 32) throw ConfigError("image_size must be >= 32");
    if (num_landmarks < 2) throw ConfigError("num_landmarks must be >= 2");
    if (n < 1) throw ConfigError("need at least one sample");
    if (noise < 0) throw ConfigError("noise must be >= 0");

    auto rng = make_rng(seed, "landmark");
    std::uniform_real_distribution<double> uni(-1.0, 1.0);

    const int L = num_landmarks;
    const double center = (image_size - 1) / 2.0;
    const double base_radius = 0.30 * image_size;

    LandmarkSet set;
    set.num_landmarks = L;
    set.image_size = image_size;
    set.images = Tensor<float>({n, 1, image_size, image_size});
    set.shapes = Tensor<float>({n, 2 * L});

    std::vector<double> xs(L), ys(L);
    for (int s = 0; s < n; ++s) {
        for (;;) {
            const double rot = noise * uni(rng) * (M_PI / 5);
            const double scale = std::exp(noise * uni(rng) * 0.25);
            const double tx = noise * uni(rng) * 0.12 * image_size;
            const double ty = noise * uni(rng) * 0.12 * image_size;
            bool inside = true;
            for (int v = 0; v < L; ++v) {
                const double ang = rot + 2 * M_PI * v / L - M_PI / 2;
                double x = center + tx + scale * base_radius * std::cos(ang);
                double y = center + ty + scale * base_radius * std::sin(ang);
                x += noise * uni(rng) * 0.02 * image_size;
                y += noise * uni(rng) * 0.02 * image_size;
                if (x < 0 || x > image_size - 1 || y < 0 || y > image_size - 1) {
                    inside = false;
                    break;
                }
                xs[v] = x;
                ys[v] = y;
            }
            if (inside) break;
        }
        float* img = set.images.data() + static_cast<std::size_t>(s) * image_size * image_size;
        for (int v = 0; v < L; ++v) {
            const int u = (v + 1) % L;
            draw_line(img, image_size, xs[v], ys[v], xs[u], ys[u]);
            set.shapes.data()[static_cast<std::size_t>(s) * 2 * L + 2 * v] = static_cast<float>(xs[v]);
            set.shapes.data()[static_cast<std::size_t>(s) * 2 * L + 2 * v + 1] = static_cast<float>(ys[v]);
        }
    }

    set.mean_shape.assign(2 * L, 0.0f);
    for (int s = 0; s < n; ++s)
        for (int k = 0; k < 2 * L; ++k)
            set.mean_shape[k] += set.shapes.data()[static_cast<std::size_t>(s) * 2 * L + k];
    for (auto& v : set.mean_shape) v /= static_cast<float>(n);
    return set;
}

double landmark_error(const std::vector<float>& pred, const Tensor<float>& truth,
                      int num_landmarks) {
    const int n = truth.dim(0);
    const int dim = 2 * num_landmarks;
    if (truth.dim(1) != dim) throw ShapeError("truth shape dim mismatch");
    if (static_cast<int>(pred.size()) != n * dim) throw ShapeError("prediction size mismatch");
    double total = 0;
    for (int s = 0; s < n; ++s) {
        const float* t = truth.data() + static_cast<std::size_t>(s) * dim;
        const float* p = pred.data() + static_cast<std::size_t>(s) * dim;
        double xmin = t[0], xmax = t[0], ymin = t[1], ymax = t[1];
        double err = 0;
        for (int v = 0; v < num_landmarks; ++v) {
            xmin = std::min(xmin, static_cast<double>(t[2 * v]));
            xmax = std::max(xmax, static_cast<double>(t[2 * v]));
            ymin = std::min(ymin, static_cast<double>(t[2 * v + 1]));
            ymax = std::max(ymax, static_cast<double>(t[2 * v + 1]));
            err += std::hypot(static_cast<double>(p[2 * v]) - t[2 * v],
                              static_cast<double>(p[2 * v + 1]) - t[2 * v + 1]);
        }
        const double diag = std::hypot(xmax - xmin, ymax - ymin);
        if (diag <= 0) throw FormatError("degenerate ground-truth shape (zero bounding box)");
        total += err / num_landmarks / diag;
    }
    return total / n;
}

}  // namespace dhm
