#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "innerlm/errors.hpp"

namespace innerlm {

// Token vocabulary layout. Contiguous id ranges keep dataset and checkpoint
// files self-describing: structural tokens, task markers, attribute tokens,
// digit tokens, then the word range used by the text grammar.
namespace vocab {
inline constexpr int PAD = 0;
inline constexpr int BOS = 1;
inline constexpr int EOS = 2;
inline constexpr int SEP = 3;
inline constexpr int BOX_OPEN = 4;
inline constexpr int BOX_CLOSE = 5;
inline constexpr int CAPTION_Q = 6;
inline constexpr int LOCATE_Q = 7;
inline constexpr int LOCATE_ALL_Q = 8;
inline constexpr int COUNT_Q = 9;
inline constexpr int WHAT_AT_Q = 10;
inline constexpr int INTENSITY_Q = 11;
inline constexpr int NONE_A = 12;

inline constexpr int SHAPE_BASE = 16;  // square, cross, disc
inline constexpr int N_SHAPES = 3;
inline constexpr int INTENSITY_BASE = 19;  // dim, mid, bright
inline constexpr int N_INTENSITY = 3;
inline constexpr int POS_BASE = 22;  // 3x3 coarse grid, row-major
inline constexpr int N_POS = 9;
inline constexpr int COUNT_BASE = 31;  // one, two, three
inline constexpr int N_COUNT = 3;
inline constexpr int DIGIT_BASE = 40;  // digits 0..9
inline constexpr int N_DIGITS = 10;
inline constexpr int WORD_BASE = 64;
inline constexpr int WORD_COUNT = 448;
inline constexpr int SIZE = 512;
}  // namespace vocab

// Grayscale image, values in [0, 1], row-major.
struct GridImage {
    int width = 0;
    int height = 0;
    std::vector<float> pixels;

    float at(int y, int x) const { return pixels[static_cast<size_t>(y) * width + x]; }
    float& at(int y, int x) { return pixels[static_cast<size_t>(y) * width + x]; }
};

// Normalized box, corners in [0, 1] with x1 < x2 and y1 < y2.
struct Box {
    float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

inline float box_iou(const Box& a, const Box& b) {
    const float ix = std::max(0.0f, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const float iy = std::max(0.0f, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const float inter = ix * iy;
    const float uni = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    return uni <= 0.0f ? 0.0f : inter / uni;
}

enum class SampleKind { Text, Caption, Instruction, Grounding };

std::string sample_kind_name(SampleKind k);
SampleKind sample_kind_from_name(const std::string& name);

struct Sample {
    SampleKind kind = SampleKind::Text;
    std::optional<GridImage> image;
    std::vector<int> prompt_ids;
    std::vector<int> response_ids;
    std::vector<uint8_t> loss_mask;  // over prompt+response, true on response positions only
    std::vector<Box> boxes;

    std::vector<int> token_ids() const {
        std::vector<int> ids = prompt_ids;
        ids.insert(ids.end(), response_ids.begin(), response_ids.end());
        return ids;
    }
};

inline std::vector<uint8_t> make_loss_mask(size_t prompt_len, size_t response_len) {
    std::vector<uint8_t> m(prompt_len + response_len, 0);
    for (size_t i = prompt_len; i < m.size(); ++i) m[i] = 1;
    return m;
}

// Box <-> token serialization: each coordinate quantized to an integer
// percentile 0..99 and emitted as two digit tokens, the whole box bracketed by
// BOX_OPEN / BOX_CLOSE. Round-trip error is bounded by 1/100 per coordinate.
std::vector<int> encode_box_tokens(const Box& box);
std::optional<Box> decode_box_tokens(const std::vector<int>& ids, size_t begin, size_t* consumed);
std::vector<Box> decode_all_boxes(const std::vector<int>& ids);

// Deterministic generators; every output is a pure function of (seed, n).
std::vector<Sample> gen_text_corpus(uint64_t seed, int n, int seq_len = 32);
std::vector<Sample> gen_caption_pairs(uint64_t seed, int n, int image_size = 16);
std::vector<Sample> gen_instruction_pairs(uint64_t seed, int n, int image_size = 16);
std::vector<Sample> gen_grounding_pairs(uint64_t seed, int n, int image_size = 16);

// Train / held-out split by index parity.
std::vector<Sample> split_train(const std::vector<Sample>& all);
std::vector<Sample> split_heldout(const std::vector<Sample>& all);

// Line-delimited JSON persistence with fixed field names and order:
// {kind, image{base64,width,height}, prompt_ids, response_ids, boxes}.
void write_samples_jsonl(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> read_samples_jsonl(const std::string& path);

std::string image_to_base64(const GridImage& img);
GridImage image_from_base64(const std::string& b64, int width, int height);

}  // namespace innerlm
