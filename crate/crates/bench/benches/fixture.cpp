#include <cstdio>
#include <vector>
// fixture program for throughput benchmarks
int accumulate(const std::vector<int>& xs) {
    int total = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
        total += xs[i]; /* running sum */
    }
    return total;
}
int main() {
    std::vector<int> xs(1024);
    for (size_t i = 0; i < xs.size(); ++i) xs[i] = (int)(i * 7 % 13);
    int total = accumulate(xs);
    printf("RESULT_OK checksum=%d\n", total);
    return 0;
}
