#pragma once

// Rows of the single- and multi-image comparison tables: four human
// columns, HAverage, four automatic columns, MAverage, Average.

#include <array>
#include <string_view>

namespace fixtures {

struct TableRow {
    std::string_view table;
    std::string_view system;
    std::array<double, 4> human;
    double haverage;
    std::array<double, 4> automatic;
    double maverage;
    double average;
};

inline constexpr TableRow kTableRows[] = {
    {"single", "S2S", {38.20, 21.32, 22.56, 17.34}, 24.86, {18.78, 36.33, 55.74, 17.81}, 32.17, 28.51},
    {"single", "Dank Learning", {39.94, 23.46, 27.72, 24.76}, 28.97, {23.76, 43.18, 62.57, 23.58}, 38.27, 33.62},
    {"single", "Transformer", {46.67, 28.45, 33.06, 26.55}, 33.68, {30.11, 50.00, 63.09, 32.86}, 44.02, 38.85},
    {"single", "MEMEIFY", {49.25, 32.13, 40.18, 29.37}, 37.73, {32.54, 53.35, 69.21, 37.11}, 48.05, 42.89},
    {"single", "BLIP-2-7B", {60.25, 43.67, 49.22, 39.26}, 48.10, {48.22, 74.02, 85.28, 50.17}, 64.42, 56.26},
    {"single", "MiniGPT-4-7B", {61.08, 46.31, 51.08, 40.22}, 49.67, {50.02, 75.31, 87.44, 52.18}, 66.24, 57.96},
    {"single", "InstructBLIP-7B", {62.55, 48.46, 55.33, 42.65}, 52.25, {52.36, 79.77, 88.13, 53.49}, 68.44, 60.34},
    {"single", "LLaVA-7B", {61.37, 47.44, 55.32, 43.07}, 51.80, {54.26, 78.12, 88.33, 54.92}, 68.91, 60.35},
    {"single", "Unified-IOXL-2B", {72.75, 60.32, 57.22, 48.08}, 59.59, {56.72, 85.34, 90.56, 57.24}, 72.47, 66.03},
    {"single", "Shikra-7B", {76.36, 66.58, 58.13, 52.57}, 63.41, {57.05, 88.76, 91.87, 58.38}, 74.02, 68.71},
    {"single", "Qwen-VL-Chat-7B", {79.62, 68.36, 58.14, 53.88}, 65.00, {57.19, 88.90, 91.98, 59.17}, 74.31, 69.66},
    {"single", "LLaVA-1.5-7B", {80.10, 69.34, 58.23, 54.01}, 65.42, {57.21, 89.33, 92.14, 59.25}, 74.48, 69.95},
    {"single", "GPT4v", {80.28, 70.42, 59.16, 55.83}, 66.42, {57.33, 91.94, 93.33, 60.08}, 75.67, 71.05},
    {"single", "XMeCap", {83.58, 76.77, 63.82, 61.17}, 71.34, {62.98, 94.87, 97.26, 66.31}, 80.36, 75.85},
    {"multi", "S2S", {35.21, 18.78, 14.36, 10.15}, 19.63, {11.69, 28.31, 46.23, 10.34}, 24.14, 21.88},
    {"multi", "Dank Learning", {40.54, 23.26, 22.55, 19.32}, 26.42, {18.91, 34.25, 55.84, 13.69}, 30.67, 28.55},
    {"multi", "Transformer", {48.57, 31.66, 24.79, 21.08}, 31.53, {22.46, 39.03, 58.56, 19.31}, 34.84, 33.18},
    {"multi", "MEMEIFY", {51.28, 39.84, 33.80, 24.09}, 37.25, {26.58, 44.24, 66.15, 21.05}, 39.51, 38.38},
    {"multi", "BLIP-2-7B", {65.13, 51.43, 44.03, 34.23}, 48.71, {42.79, 64.58, 84.28, 38.11}, 57.44, 53.07},
    {"multi", "MiniGPT-4-7B", {65.12, 51.44, 45.35, 35.25}, 49.29, {43.66, 66.32, 85.10, 39.55}, 58.66, 53.97},
    {"multi", "InstructBLIP-7B", {67.98, 55.66, 49.04, 39.43}, 53.03, {46.77, 68.03, 85.74, 42.13}, 60.67, 56.85},
    {"multi", "LLaVA-7B", {68.22, 55.11, 48.37, 40.46}, 53.04, {47.02, 69.44, 86.47, 41.97}, 61.23, 57.13},
    {"multi", "Unified-IOXL-2B", {69.35, 57.68, 49.55, 43.65}, 55.06, {48.34, 70.56, 87.21, 44.57}, 62.67, 58.86},
    {"multi", "Shikra-7B", {69.99, 59.32, 49.91, 45.66}, 56.22, {48.55, 71.88, 87.26, 46.24}, 63.48, 59.85},
    {"multi", "Qwen-VL-Chat-7B", {70.76, 60.47, 49.22, 46.14}, 56.65, {49.10, 72.90, 87.16, 46.32}, 63.87, 60.26},
    {"multi", "LLaVA-1.5-7B", {71.00, 60.03, 49.76, 46.99}, 56.95, {49.13, 73.11, 87.32, 46.87}, 64.11, 60.53},
    {"multi", "GPT4v", {71.08, 60.55, 50.13, 47.14}, 57.23, {50.26, 73.36, 88.30, 47.92}, 64.96, 61.09},
    {"multi", "XMeCap", {76.42, 65.77, 55.92, 52.49}, 62.65, {56.62, 78.11, 93.24, 52.02}, 70.00, 66.32},
};

} // namespace fixtures
