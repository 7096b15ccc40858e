#include <iostream>

int main() {
    std::cout << "partparse: placeholder\n";
    return 0;
}
