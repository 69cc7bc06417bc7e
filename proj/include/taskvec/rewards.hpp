#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace taskvec {

struct RewardSpec {
    enum class Kind { Exact, Levenshtein };
    Kind kind = Kind::Exact;
    bool normalize = true;  // trim, casefold, collapse internal whitespace runs
};

namespace detail {

inline bool is_ascii_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// UTF-8 to Unicode scalar values. Invalid sequences fall back to one code
// point per byte, which keeps the decoding total and deterministic.
inline std::u32string utf8_decode(std::string_view s) {
    std::u32string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const unsigned char c0 = static_cast<unsigned char>(s[i]);
        int len = 0;
        char32_t cp = 0;
        if (c0 < 0x80) {
            len = 1;
            cp = c0;
        } else if ((c0 >> 5) == 0x6) {
            len = 2;
            cp = c0 & 0x1F;
        } else if ((c0 >> 4) == 0xE) {
            len = 3;
            cp = c0 & 0x0F;
        } else if ((c0 >> 3) == 0x1E) {
            len = 4;
            cp = c0 & 0x07;
        }
        bool ok = len > 0 && i + len <= s.size();
        for (int k = 1; ok && k < len; ++k) {
            const unsigned char ck = static_cast<unsigned char>(s[i + k]);
            if ((ck >> 6) != 0x2) ok = false;
            cp = (cp << 6) | (ck & 0x3F);
        }
        if (!ok) {
            out.push_back(c0);
            ++i;
        } else {
            out.push_back(cp);
            i += len;
        }
    }
    return out;
}

}  // namespace detail

/// Canonical answer form: trim, lowercase ASCII letters, collapse internal
/// whitespace runs to a single space. Bytes outside ASCII pass through.
inline std::string normalize_answer(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char raw : s) {
        const unsigned char c = static_cast<unsigned char>(raw);
        if (detail::is_ascii_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : raw);
    }
    return out;
}

/// Contents of the last balanced \boxed{...} group, scanning occurrences from
/// the end. Nested braces count; nothing balanced means no answer.
inline std::optional<std::string> extract_boxed(std::string_view text) {
    constexpr std::string_view tag = "\\boxed{";
    std::size_t pos = text.rfind(tag);
    while (pos != std::string_view::npos) {
        const std::size_t open = pos + tag.size();
        int depth = 1;
        for (std::size_t i = open; i < text.size(); ++i) {
            if (text[i] == '{') {
                ++depth;
            } else if (text[i] == '}' && --depth == 0) {
                return std::string(text.substr(open, i - open));
            }
        }
        if (pos == 0) break;
        pos = text.rfind(tag, pos - 1);
    }
    return std::nullopt;
}

inline double exact_match_reward(std::string_view pred, std::string_view target,
                                 const RewardSpec& spec = {}) {
    if (!spec.normalize) return pred == target ? 1.0 : 0.0;
    return normalize_answer(pred) == normalize_answer(target) ? 1.0 : 0.0;
}

/// Unit-cost edit distance over Unicode scalar values, two-row DP.
inline std::size_t levenshtein_distance(std::string_view a, std::string_view b) {
    const std::u32string ua = detail::utf8_decode(a);
    const std::u32string ub = detail::utf8_decode(b);
    if (ua.empty()) return ub.size();
    if (ub.empty()) return ua.size();

    std::vector<std::size_t> prev(ub.size() + 1), curr(ub.size() + 1);
    for (std::size_t j = 0; j <= ub.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= ua.size(); ++i) {
        curr[0] = i;
        for (std::size_t j = 1; j <= ub.size(); ++j) {
            const std::size_t substitute = prev[j - 1] + (ua[i - 1] == ub[j - 1] ? 0 : 1);
            curr[j] = std::min({prev[j] + 1, curr[j - 1] + 1, substitute});
        }
        std::swap(prev, curr);
    }
    return prev[ub.size()];
}

/// 1 - d(pred, target) / max(|pred|, |target|) in code points, clamped to
/// [0, 1]; two empty strings match perfectly.
inline double levenshtein_reward(std::string_view pred, std::string_view target,
                                 const RewardSpec& spec = {}) {
    std::string np, nt;
    if (spec.normalize) {
        np = normalize_answer(pred);
        nt = normalize_answer(target);
        pred = np;
        target = nt;
    }
    const std::size_t len_a = detail::utf8_decode(pred).size();
    const std::size_t len_b = detail::utf8_decode(target).size();
    if (len_a == 0 && len_b == 0) return 1.0;
    const double d = static_cast<double>(levenshtein_distance(pred, target));
    const double reward = 1.0 - d / static_cast<double>(std::max(len_a, len_b));
    return std::clamp(reward, 0.0, 1.0);
}

inline double compute_reward(std::string_view pred, std::string_view target,
                             const RewardSpec& spec) {
    return spec.kind == RewardSpec::Kind::Exact ? exact_match_reward(pred, target, spec)
                                                : levenshtein_reward(pred, target, spec);
}

}  // namespace taskvec
